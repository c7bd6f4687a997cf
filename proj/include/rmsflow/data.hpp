#pragma once

// Synthetic scene pairs with exact ground-truth flow, the binary scene format, dataset
// directories with a split manifest, random subsampling and rigid augmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "rmsflow/binio.hpp"
#include "rmsflow/errors.hpp"
#include "rmsflow/geom.hpp"
#include "rmsflow/rng.hpp"

namespace rmsflow {

struct ScenePair {
    PointCloud pc_t;
    PointCloud pc_t1;
    std::vector<float> gt_flow;  // N x 3, aligned with pc_t; empty if unknown
    std::string scene_id;

    bool has_gt() const { return !gt_flow.empty(); }

    void validate() const
    {
        pc_t.validate();
        pc_t1.validate();
        if (has_gt()) {
            if (gt_flow.size() != pc_t.xyz.size()) throw ValidationError("gt_flow rows do not match pc_t");
            for (float v : gt_flow) {
                if (!std::isfinite(v)) throw ValidationError("gt_flow has a non-finite value");
            }
        }
    }
};

enum class ShapeKind : std::uint8_t { plane, box, sphere, blob };

struct SynthConfig {
    std::size_t objects = 8;
    std::size_t points_per_object = 320;
    std::vector<ShapeKind> shapes{ShapeKind::plane, ShapeKind::box, ShapeKind::sphere, ShapeKind::blob};
    double size_min = 0.5;       // object extent, meters
    double size_max = 2.0;
    double r_max = 0.1;          // per-object rotation bound, radians
    double t_max = 0.5;          // per-object translation bound, meters
    double sigma = 0.005;        // sensor noise on pc_t1, meters
    double drop = 0.1;           // fraction of pc_t1 points removed
    double workspace = 10.0;     // cube edge, meters, centered at the origin
    double static_fraction = 0.0;  // probability that a scene has no motion at all

    void validate() const
    {
        if (objects == 0 || points_per_object == 0) throw ConfigError("synthetic config: need at least one object and point");
        if (shapes.empty()) throw ConfigError("synthetic config: empty shape set");
        if (sigma < 0.0) throw ConfigError("synthetic config: sigma must be >= 0");
        if (!(drop >= 0.0 && drop < 1.0)) throw ConfigError("synthetic config: drop fraction must lie in [0,1)");
        if (!(size_min > 0.0 && size_max >= size_min)) throw ConfigError("synthetic config: bad size range");
        if (r_max < 0.0 || t_max < 0.0 || workspace <= 0.0) throw ConfigError("synthetic config: negative range");
        if (!(static_fraction >= 0.0 && static_fraction <= 1.0)) throw ConfigError("synthetic config: static_fraction");
    }
};

using Mat3 = std::array<std::array<double, 3>, 3>;
using Vec3 = std::array<double, 3>;

inline Mat3 axis_angle(const Vec3& axis, double angle)
{
    const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    const double x = axis[0] / n, y = axis[1] / n, z = axis[2] / n;
    const double c = std::cos(angle), s = std::sin(angle), C = 1.0 - c;
    return {{{c + x * x * C, x * y * C - z * s, x * z * C + y * s},
             {y * x * C + z * s, c + y * y * C, y * z * C - x * s},
             {z * x * C - y * s, z * y * C + x * s, c + z * z * C}}};
}

inline Mat3 matmul(const Mat3& a, const Mat3& b)
{
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
    return r;
}

inline Vec3 apply(const Mat3& m, const Vec3& v)
{
    return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2], m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

/// R = Rz(az) * Ry(ay) * Rx(ax)
inline Mat3 euler_xyz(double ax, double ay, double az)
{
    return matmul(axis_angle({0, 0, 1}, az), matmul(axis_angle({0, 1, 0}, ay), axis_angle({1, 0, 0}, ax)));
}

namespace detail {

inline Vec3 unit_vector(Rng& rng)
{
    std::normal_distribution<double> g(0.0, 1.0);
    for (;;) {
        Vec3 v{g(rng), g(rng), g(rng)};
        const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if (n > 1e-9) return {v[0] / n, v[1] / n, v[2] / n};
    }
}

/// Points on an object centered at the origin in its own frame.
inline std::vector<Vec3> sample_shape(ShapeKind kind, double size, std::size_t n, Rng& rng)
{
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<Vec3> pts;
    pts.reserve(n);
    switch (kind) {
    case ShapeKind::plane: {
        const double w = size, h = size * (0.5 + 0.5 * u01(rng));
        for (std::size_t i = 0; i < n; ++i) pts.push_back({w * u(rng), h * u(rng), 0.0});
        break;
    }
    case ShapeKind::box: {
        const Vec3 d{size * (0.5 + 0.5 * u01(rng)), size * (0.5 + 0.5 * u01(rng)), size * (0.5 + 0.5 * u01(rng))};
        const std::array<double, 3> face_area{d[1] * d[2], d[0] * d[2], d[0] * d[1]};
        std::discrete_distribution<int> face(face_area.begin(), face_area.end());
        for (std::size_t i = 0; i < n; ++i) {
            const int a = face(rng);
            Vec3 p{d[0] * u(rng), d[1] * u(rng), d[2] * u(rng)};
            p[a] = (u01(rng) < 0.5 ? -0.5 : 0.5) * d[a];
            pts.push_back(p);
        }
        break;
    }
    case ShapeKind::sphere: {
        for (std::size_t i = 0; i < n; ++i) {
            const Vec3 v = unit_vector(rng);
            pts.push_back({0.5 * size * v[0], 0.5 * size * v[1], 0.5 * size * v[2]});
        }
        break;
    }
    case ShapeKind::blob: {
        std::normal_distribution<double> g(0.0, 1.0);
        const Vec3 sd{size * (0.1 + 0.15 * u01(rng)), size * (0.1 + 0.15 * u01(rng)), size * (0.1 + 0.15 * u01(rng))};
        for (std::size_t i = 0; i < n; ++i) pts.push_back({sd[0] * g(rng), sd[1] * g(rng), sd[2] * g(rng)});
        break;
    }
    }
    return pts;
}

}  // namespace detail

/// Per-object rigid scene: pc_t1 = R_o (p - c_o) + c_o + t_o + noise, minus a dropped subset;
/// gt_flow = noise-free transformed position minus original position.
/// `object_of`, when given, receives the object id of every pc_t row.
inline ScenePair gen_synthetic(const SynthConfig& cfg, Rng& rng, std::vector<std::uint32_t>* object_of = nullptr)
{
    cfg.validate();
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_real_distribution<double> upos(-0.5 * cfg.workspace, 0.5 * cfg.workspace);
    std::uniform_int_distribution<std::size_t> pick_shape(0, cfg.shapes.size() - 1);
    std::normal_distribution<double> noise(0.0, 1.0);

    const bool is_static = u01(rng) < cfg.static_fraction;
    const std::size_t n = cfg.objects * cfg.points_per_object;
    std::vector<float> pt, pt1, gt;
    pt.reserve(3 * n);
    pt1.reserve(3 * n);
    gt.reserve(3 * n);
    if (object_of) object_of->clear();

    for (std::size_t o = 0; o < cfg.objects; ++o) {
        const ShapeKind kind = cfg.shapes[pick_shape(rng)];
        const double size = cfg.size_min + (cfg.size_max - cfg.size_min) * u01(rng);
        const Mat3 orient = axis_angle(detail::unit_vector(rng), std::numbers::pi * u01(rng));
        const Vec3 center{upos(rng), upos(rng), upos(rng)};
        const Vec3 rot_axis = detail::unit_vector(rng);
        const double angle = is_static ? 0.0 : cfg.r_max * u01(rng);
        const Vec3 dir = detail::unit_vector(rng);
        const double mag = is_static ? 0.0 : cfg.t_max * u01(rng);
        const Mat3 motion = axis_angle(rot_axis, angle);
        const Vec3 trans{mag * dir[0], mag * dir[1], mag * dir[2]};

        for (const Vec3& local : detail::sample_shape(kind, size, cfg.points_per_object, rng)) {
            const Vec3 r = apply(orient, local);
            const Vec3 p{center[0] + r[0], center[1] + r[1], center[2] + r[2]};
            const Vec3 m = apply(motion, r);
            const Vec3 q{center[0] + m[0] + trans[0], center[1] + m[1] + trans[1], center[2] + m[2] + trans[2]};
            for (int a = 0; a < 3; ++a) {
                const float pf = static_cast<float>(p[a]);
                pt.push_back(pf);
                // flow is the difference of the stored (rounded) endpoints, so zero motion gives exactly zero
                gt.push_back(static_cast<float>(static_cast<double>(static_cast<float>(q[a])) - pf));
                pt1.push_back(static_cast<float>(q[a] + cfg.sigma * noise(rng)));
            }
            if (object_of) object_of->push_back(static_cast<std::uint32_t>(o));
        }
    }

    const auto ndrop = static_cast<std::size_t>(std::floor(cfg.drop * static_cast<double>(n)));
    if (ndrop > 0) {
        PointCloud full(std::move(pt1));
        SampleIndex keep = random_sample(full, n - ndrop, rng);
        std::sort(keep.indices.begin(), keep.indices.end());
        pt1 = select(full, keep).xyz;
    }
    return ScenePair{PointCloud(std::move(pt)), PointCloud(std::move(pt1)), std::move(gt), {}};
}

// ---------------------------------------------------------------------------
// Scene file: "SFPR" | u32 version=1 | u32 N | u32 M | u8 flags (bit0: gt) |
//             f32 pc_t[3N] | f32 pc_t1[3M] | f32 gt[3N] if flagged
// ---------------------------------------------------------------------------

inline constexpr char kSceneMagic[4] = {'S', 'F', 'P', 'R'};
inline constexpr std::uint32_t kSceneVersion = 1;

inline void write_scene(const ScenePair& pair, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open scene for writing: " + path.string());
    os.write(kSceneMagic, 4);
    binio::put_uint<std::uint32_t>(os, kSceneVersion);
    binio::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(pair.pc_t.size()));
    binio::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(pair.pc_t1.size()));
    binio::put_uint<std::uint8_t>(os, pair.has_gt() ? 1 : 0);
    for (float v : pair.pc_t.xyz) binio::put_f32(os, v);
    for (float v : pair.pc_t1.xyz) binio::put_f32(os, v);
    for (float v : pair.gt_flow) binio::put_f32(os, v);
    if (!os) throw FormatError("write failed: " + path.string());
}

inline ScenePair read_scene(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open scene: " + path.string());
    try {
        char magic[4];
        if (!is.read(magic, 4)) throw TruncatedFileError("truncated file while reading magic");
        if (std::memcmp(magic, kSceneMagic, 4) != 0) throw BadMagicError("bad scene magic");
        const auto version = binio::get_uint<std::uint32_t>(is, "version");
        if (version != kSceneVersion) throw VersionMismatchError("unsupported scene version " + std::to_string(version));
        const auto n = binio::get_uint<std::uint32_t>(is, "N");
        const auto m = binio::get_uint<std::uint32_t>(is, "M");
        const auto flags = binio::get_uint<std::uint8_t>(is, "flags");
        if (n == 0 || m == 0) throw ValidationError("scene has an empty cloud (N=" + std::to_string(n) + ", M=" + std::to_string(m) + ")");
        auto read_floats = [&is](std::size_t count, const char* what) {
            std::vector<float> v(count);
            for (float& x : v) x = binio::get_f32(is, what);
            return v;
        };
        ScenePair pair;
        pair.pc_t = PointCloud(read_floats(3ull * n, "pc_t"));
        pair.pc_t1 = PointCloud(read_floats(3ull * m, "pc_t1"));
        if (flags & 1u) pair.gt_flow = read_floats(3ull * n, "gt_flow");
        pair.scene_id = path.stem().string();
        try {
            pair.validate();
        } catch (const ValidationError&) {
            throw;
        } catch (const std::exception& e) {
            throw ValidationError(e.what());
        }
        return pair;
    } catch (const FormatError& e) {
        // keep the concrete error type, add the path
        const std::string msg = std::string(e.what()) + ": " + path.string();
        if (dynamic_cast<const TruncatedFileError*>(&e)) throw TruncatedFileError(msg);
        if (dynamic_cast<const BadMagicError*>(&e)) throw BadMagicError(msg);
        if (dynamic_cast<const VersionMismatchError*>(&e)) throw VersionMismatchError(msg);
        if (dynamic_cast<const ValidationError*>(&e)) throw ValidationError(msg);
        throw FormatError(msg);
    }
}

/// n random rows of pc_t (gt follows) and n independent random rows of pc_t1, each in random order.
inline ScenePair subsample_pair(const ScenePair& pair, std::size_t n, Rng& rng)
{
    if (n > pair.pc_t.size() || n > pair.pc_t1.size()) {
        throw SizeError("subsample_pair: " + std::to_string(n) + " points requested, scene has N=" +
                        std::to_string(pair.pc_t.size()) + ", M=" + std::to_string(pair.pc_t1.size()));
    }
    const SampleIndex it = random_sample(pair.pc_t, n, rng);
    const SampleIndex it1 = random_sample(pair.pc_t1, n, rng);
    ScenePair out;
    out.pc_t = select(pair.pc_t, it);
    out.pc_t1 = select(pair.pc_t1, it1);
    if (pair.has_gt()) out.gt_flow = PointCloud(select(PointCloud(pair.gt_flow), it)).xyz;
    out.scene_id = pair.scene_id;
    return out;
}

struct AugmentConfig {
    double a_max = 0.1;  // per-axis rotation bound, radians
    double t_max = 0.5;  // per-axis translation bound, meters
};

/// p' = R p + T on both clouds, gt' = R gt.
inline ScenePair apply_rigid(const ScenePair& pair, const Mat3& r, const Vec3& t)
{
    auto move_points = [&](const std::vector<float>& xyz, bool translate) {
        std::vector<float> out(xyz.size());
        for (std::size_t i = 0; i < xyz.size(); i += 3) {
            const Vec3 v = apply(r, {xyz[i], xyz[i + 1], xyz[i + 2]});
            for (int a = 0; a < 3; ++a) out[i + a] = static_cast<float>(v[a] + (translate ? t[a] : 0.0));
        }
        return out;
    };
    ScenePair out;
    out.pc_t = PointCloud(move_points(pair.pc_t.xyz, true));
    out.pc_t1 = PointCloud(move_points(pair.pc_t1.xyz, true));
    out.gt_flow = move_points(pair.gt_flow, false);
    out.scene_id = pair.scene_id;
    return out;
}

inline ScenePair augment(const ScenePair& pair, Rng& rng, const AugmentConfig& cfg)
{
    std::uniform_real_distribution<double> ua(-cfg.a_max, cfg.a_max);
    std::uniform_real_distribution<double> ut(-cfg.t_max, cfg.t_max);
    const double ax = ua(rng), ay = ua(rng), az = ua(rng);
    const Vec3 t{ut(rng), ut(rng), ut(rng)};
    return apply_rigid(pair, euler_xyz(ax, ay, az), t);
}

// ---------------------------------------------------------------------------
// Dataset directory: scene_NNNNN.sfpr files plus manifest.csv ("file,split")
// ---------------------------------------------------------------------------

struct SplitRatios {
    double train = 0.7;
    double val = 0.15;  // test gets the remainder
};

struct ManifestEntry {
    std::string file;
    std::string split;
};

/// Splits n scenes by sorting on a seeded hash of the scene index; sizes are exact
/// (round(n*train), round(n*val), remainder).
inline std::vector<std::string> assign_splits(std::size_t n, const SplitRatios& ratios, std::uint64_t seed)
{
    std::vector<std::pair<std::uint64_t, std::size_t>> keyed(n);
    for (std::size_t i = 0; i < n; ++i) keyed[i] = {derive_seed(seed, {seed_tag::split, i}), i};
    std::sort(keyed.begin(), keyed.end());
    const auto ntrain = static_cast<std::size_t>(std::llround(ratios.train * static_cast<double>(n)));
    const auto nval = std::min(n - std::min(n, ntrain), static_cast<std::size_t>(std::llround(ratios.val * static_cast<double>(n))));
    std::vector<std::string> split(n);
    for (std::size_t r = 0; r < n; ++r) {
        split[keyed[r].second] = r < ntrain ? "train" : (r < ntrain + nval ? "val" : "test");
    }
    return split;
}

inline std::string scene_file_name(std::size_t i)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%05zu.sfpr", i);
    return buf;
}

/// Generates scene i from its own derived seed, so any subset of a dataset is reproducible alone.
inline ScenePair gen_scene(const SynthConfig& cfg, std::uint64_t seed, std::size_t i)
{
    Rng rng(derive_seed(seed, {seed_tag::data, i}));
    ScenePair p = gen_synthetic(cfg, rng);
    p.scene_id = std::filesystem::path(scene_file_name(i)).stem().string();
    return p;
}

inline std::vector<ManifestEntry> write_dataset(const std::filesystem::path& dir, const SynthConfig& cfg,
                                                std::size_t n_scenes, const SplitRatios& ratios, std::uint64_t seed)
{
    std::filesystem::create_directories(dir);
    const auto split = assign_splits(n_scenes, ratios, seed);
    std::vector<ManifestEntry> manifest;
    for (std::size_t i = 0; i < n_scenes; ++i) {
        write_scene(gen_scene(cfg, seed, i), dir / scene_file_name(i));
        manifest.push_back({scene_file_name(i), split[i]});
    }
    std::ofstream os(dir / "manifest.csv", std::ios::trunc);
    if (!os) throw FormatError("cannot write manifest in " + dir.string());
    os << "file,split\n";
    for (const auto& e : manifest) os << e.file << ',' << e.split << '\n';
    return manifest;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir)
{
    std::ifstream is(dir / "manifest.csv");
    if (!is) throw FormatError("dataset manifest not found: " + (dir / "manifest.csv").string());
    std::vector<ManifestEntry> out;
    std::string line;
    std::getline(is, line);
    if (line != "file,split") throw FormatError("bad manifest header in " + dir.string());
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw FormatError("bad manifest line: " + line);
        out.push_back({line.substr(0, comma), line.substr(comma + 1)});
    }
    return out;
}

inline std::vector<ScenePair> load_split(const std::filesystem::path& dir, const std::string& split)
{
    std::vector<ScenePair> out;
    for (const auto& e : read_manifest(dir)) {
        if (e.split == split) out.push_back(read_scene(dir / e.file));
    }
    return out;
}

}  // namespace rmsflow
