#pragma once

// Checkpoint file:
//   "RMSW" | u32 version=1 | u32 count |
//   count x ( u16 name_len | name (UTF-8) | u8 rank | rank x u32 dim | f32 data... )
// All integers and floats little-endian.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "rmsflow/binio.hpp"
#include "rmsflow/numcore.hpp"

namespace rmsflow {

using TensorMap = std::map<std::string, Tensor<float>>;

inline constexpr char kCheckpointMagic[4] = {'R', 'M', 'S', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::filesystem::path& path, const TensorMap& tensors)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open checkpoint for writing: " + path.string());
    os.write(kCheckpointMagic, 4);
    binio::put_uint<std::uint32_t>(os, kCheckpointVersion);
    binio::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xFFFF) throw FormatError("parameter name too long: " + name);
        if (t.rank() > 0xFF) throw FormatError("tensor rank too large: " + name);
        binio::put_uint<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        binio::put_uint<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape) binio::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(d));
        for (float x : t.data) binio::put_f32(os, x);
    }
    if (!os) throw FormatError("write failed: " + path.string());
}

inline TensorMap read_checkpoint(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint: " + path.string());
    char magic[4];
    if (!is.read(magic, 4)) throw TruncatedFileError("truncated file while reading magic: " + path.string());
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw BadMagicError("bad checkpoint magic: " + path.string());
    const auto version = binio::get_uint<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion) {
        throw VersionMismatchError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = binio::get_uint<std::uint32_t>(is, "count");
    TensorMap out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = binio::get_uint<std::uint16_t>(is, "name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw TruncatedFileError("truncated file while reading name");
        const auto rank = binio::get_uint<std::uint8_t>(is, "rank");
        Shape shape(rank);
        for (auto& d : shape) d = binio::get_uint<std::uint32_t>(is, "dims");
        Tensor<float> t(shape);
        for (float& x : t.data) x = binio::get_f32(is, "tensor data");
        if (!out.emplace(name, std::move(t)).second) throw FormatError("duplicate tensor '" + name + "'");
    }
    return out;
}

inline constexpr const char* kMomentPrefix1 = "optim.m/";
inline constexpr const char* kMomentPrefix2 = "optim.v/";
inline constexpr const char* kStepKey = "optim.step";

/// Parameters only, or parameters plus Adam moments and step count (for resuming).
inline TensorMap to_tensor_map(const ParamStore<float>& params, bool with_optimizer)
{
    TensorMap out;
    for (const auto& [name, e] : params.entries()) {
        out.emplace(name, e.value);
        if (with_optimizer) {
            out.emplace(kMomentPrefix1 + name, Tensor<float>(e.value.shape, e.m));
            out.emplace(kMomentPrefix2 + name, Tensor<float>(e.value.shape, e.v));
        }
    }
    if (with_optimizer) {
        // step stored as two 16-bit halves so every count below 2^32 is exact in f32
        const auto s = static_cast<std::uint32_t>(params.step());
        out.emplace(kStepKey, Tensor<float>({2}, std::vector<float>{static_cast<float>(s & 0xFFFF), static_cast<float>(s >> 16)}));
    }
    return out;
}

/// Copies checkpoint tensors into an existing store whose layout defines the expected shapes.
/// Every mismatch (missing, unexpected, wrong shape) is reported in one ConfigError.
inline void load_into(ParamStore<float>& params, const TensorMap& tensors)
{
    std::string problems;
    for (auto& [name, e] : params.entries()) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            problems += "  missing parameter '" + name + "'\n";
        } else if (it->second.shape != e.value.shape) {
            problems += "  parameter '" + name + "': checkpoint " + shape_str(it->second.shape) + " vs model " +
                        shape_str(e.value.shape) + "\n";
        }
    }
    for (const auto& [name, _] : tensors) {
        if (name.rfind("optim.", 0) == 0) continue;
        if (!params.contains(name)) problems += "  unexpected parameter '" + name + "'\n";
    }
    if (!problems.empty()) throw ConfigError("checkpoint does not match model:\n" + problems);
    for (auto& [name, e] : params.entries()) {
        e.value = tensors.at(name);
        if (auto m = tensors.find(kMomentPrefix1 + name); m != tensors.end()) e.m = m->second.data;
        if (auto v = tensors.find(kMomentPrefix2 + name); v != tensors.end()) e.v = v->second.data;
    }
    if (auto s = tensors.find(kStepKey); s != tensors.end() && s->second.size() == 2) {
        params.set_step(static_cast<std::uint64_t>(s->second[0]) | (static_cast<std::uint64_t>(s->second[1]) << 16));
    }
}

}  // namespace rmsflow
