#pragma once

// Little-endian primitive reads/writes shared by the checkpoint and scene formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "rmsflow/errors.hpp"

namespace rmsflow::binio {

template <class U>
    requires std::is_unsigned_v<U>
void put_uint(std::ostream& os, U value)
{
    char bytes[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
    os.write(bytes, sizeof(U));
}

inline void put_f32(std::ostream& os, float value) { put_uint(os, std::bit_cast<std::uint32_t>(value)); }

/// Reads sizeof(U) bytes; throws FormatError naming `what` if the stream ends early.
template <class U>
    requires std::is_unsigned_v<U>
U get_uint(std::istream& is, const char* what)
{
    unsigned char bytes[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
        throw TruncatedFileError(std::string("truncated file while reading ") + what);
    }
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
    return value;
}

inline float get_f32(std::istream& is, const char* what)
{
    return std::bit_cast<float>(get_uint<std::uint32_t>(is, what));
}

}  // namespace rmsflow::binio
