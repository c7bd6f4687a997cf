#pragma once

// Batch commands behind the CLI: dataset generation, training, evaluation, benchmarks, ablation.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "rmsflow/config.hpp"

namespace rmsflow {

/// Writes the resolved configuration next to a command's outputs.
inline void echo_config(const RunConfig& cfg, const std::filesystem::path& path)
{
    RunConfig copy = cfg;
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << ConfigBinder(copy).dump();
}

inline std::vector<ManifestEntry> cmd_gen(const RunConfig& cfg)
{
    const auto entries = write_dataset(cfg.data_dir, cfg.synth, cfg.n_scenes, cfg.split, cfg.seed);
    echo_config(cfg, std::filesystem::path(cfg.data_dir) / "config.resolved");
    return entries;
}

inline TrainData load_train_data(const RunConfig& cfg)
{
    if (!std::filesystem::exists(std::filesystem::path(cfg.data_dir) / "manifest.csv")) {
        throw FormatError("no dataset at '" + cfg.data_dir + "' (manifest.csv missing); run `gen` first");
    }
    return {load_split(cfg.data_dir, "train"), load_split(cfg.data_dir, "val")};
}

inline TrainConfig effective_train_config(const RunConfig& cfg)
{
    TrainConfig t = cfg.train;
    t.seed = cfg.seed;
    t.threads = cfg.threads;
    return t;
}

inline TrainResult cmd_train(const RunConfig& cfg, bool resume)
{
    const TrainData data = load_train_data(cfg);
    echo_config(cfg, std::filesystem::path(cfg.out_dir) / "config.resolved");
    Trainer trainer(cfg.net, cfg.loss, effective_train_config(cfg), cfg.out_dir);
    return trainer.run(data, resume);
}

inline ParamStore<float> load_model(const NetConfig& net, const std::filesystem::path& checkpoint)
{
    ParamStore<float> params = declare_network(net).init(0);
    load_into(params, read_checkpoint(checkpoint));
    return params;
}

struct EvalRun {
    std::size_t points = 0;
    std::vector<SceneResult> results;
};

/// One evaluation pass per requested density; scenes too small for a density are an error.
inline std::vector<EvalRun> cmd_eval(const RunConfig& cfg, const ParamStore<float>& params,
                                     const std::vector<ScenePair>& scenes, const std::vector<std::size_t>& densities,
                                     bool oracle)
{
    std::vector<EvalRun> runs;
    for (std::size_t n : densities) {
        EvalOptions eo;
        eo.points = n;
        eo.seed = cfg.seed;
        eo.oracle = oracle;
        eo.threads = cfg.threads;
        runs.push_back({n, evaluate_scenes(params, cfg.net, scenes, eo)});
    }
    return runs;
}

inline void write_eval_csv(std::ostream& os, const std::vector<EvalRun>& runs, bool timing)
{
    os << kEvalCsvHeader << '\n';
    for (const auto& r : runs) write_eval_rows(os, r.results, r.points, timing);
}

// ---------------------------------------------------------------------------
// Benchmarks
// ---------------------------------------------------------------------------

struct BenchRow {
    std::string op;
    std::size_t p = 0;
    std::size_t m_or_k = 0;
    std::uint64_t seed = 0;
    double wall_ms = 0.0;
    long long peak_bytes = 0;
};

inline constexpr const char* kBenchCsvHeader = "op,P,m_or_k,seed,wall_ms,peak_bytes";

namespace detail {

inline long long status_kb(const char* field)
{
    std::ifstream in("/proc/self/status");
    std::string line;
    const std::string key = std::string(field) + ":";
    while (std::getline(in, line)) {
        if (line.rfind(key, 0) == 0) return std::stoll(line.substr(key.size()));
    }
    return 0;
}

/// Resets the peak-RSS counter where the kernel allows it.
inline void reset_peak()
{
    std::ofstream out("/proc/self/clear_refs");
    if (out) out << "5";
}

inline PointCloud uniform_cloud(std::size_t n, Rng& rng)
{
    std::uniform_real_distribution<float> u(-10.0f, 10.0f);
    std::vector<float> xyz(3 * n);
    for (float& v : xyz) v = u(rng);
    return PointCloud(std::move(xyz));
}

}  // namespace detail

/// Median wall time over `trials` and the approximate peak resident-memory growth of one call.
template <class Fn>
BenchRow measure(const std::string& op, std::size_t p, std::size_t mk, std::uint64_t seed, std::size_t trials, Fn&& fn)
{
    std::vector<double> times;
    long long peak = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        detail::reset_peak();
        const long long before = detail::status_kb("VmRSS");
        const auto t0 = std::chrono::steady_clock::now();
        fn(t);
        times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        peak = std::max(peak, (detail::status_kb("VmHWM") - before) * 1024);
    }
    std::sort(times.begin(), times.end());
    return {op, p, mk, seed, times[times.size() / 2], std::max(0LL, peak)};
}

/// Kernel timings over the configured density grid. Inputs are uniform random clouds drawn from
/// (seed, P); every trial reuses the same input.
inline std::vector<BenchRow> cmd_bench(const RunConfig& cfg, const std::function<void(const BenchRow&)>& on_row = {})
{
    const BenchConfig& b = cfg.bench;
    std::vector<BenchRow> rows;
    auto emit = [&](BenchRow r) {
        if (on_row) on_row(r);
        rows.push_back(std::move(r));
    };
    auto wants = [&](const char* op) { return std::find(b.ops.begin(), b.ops.end(), op) != b.ops.end(); };
    const ParamStore<float> params = wants("forward") ? init_params(cfg.net, cfg.seed) : ParamStore<float>{};
    for (std::size_t p : b.sizes) {
        const std::uint64_t seed = derive_seed(cfg.seed, {seed_tag::bench, p});
        Rng rng(seed);
        const PointCloud a = detail::uniform_cloud(p, rng);
        const PointCloud q = detail::uniform_cloud(p, rng);
        const auto m = std::max<std::size_t>(1, static_cast<std::size_t>(b.sample_ratio * static_cast<double>(p)));
        if (wants("random_sample")) {
            emit(measure("random_sample", p, m, seed, b.trials, [&](std::size_t t) {
                Rng r(derive_seed(seed, {t}));
                volatile auto n = random_sample(a, m, r).size();
                (void)n;
            }));
        }
        if (wants("farthest_point_sample") && p <= b.max_brute) {
            emit(measure("farthest_point_sample", p, m, seed, b.trials, [&](std::size_t) {
                volatile auto n = farthest_point_sample(a, m).size();
                (void)n;
            }));
        }
        const std::size_t k = std::min(b.k, p);
        if (wants("knn_brute") && p <= b.max_brute) {
            emit(measure("knn_brute", p, k, seed, b.trials, [&](std::size_t) {
                volatile auto n = knn_brute(q, a, k).dist2.size();
                (void)n;
            }));
        }
        if (wants("knn_accel")) {
            emit(measure("knn_accel", p, k, seed, b.trials, [&](std::size_t) {
                volatile auto n = knn_accel(q, a, k).dist2.size();
                (void)n;
            }));
        }
        if (wants("forward") && p >= cfg.net.min_points() && p <= b.max_forward) {
            emit(measure("forward", p, cfg.net.min_points(), seed, b.trials, [&](std::size_t t) {
                Rng r(derive_seed(seed, {t}));
                volatile auto n = predict(params, cfg.net, a, q, r).flows[0].size();
                (void)n;
            }));
        }
    }
    return rows;
}

inline void write_bench_row(std::ostream& os, const BenchRow& r)
{
    os << r.op << ',' << r.p << ',' << r.m_or_k << ',' << r.seed << ',' << format_double(r.wall_ms, "%.4f") << ','
       << r.peak_bytes << '\n';
}

// ---------------------------------------------------------------------------
// Ablation over the flow-embedding variants
// ---------------------------------------------------------------------------

struct AblationVariant {
    EmbedFlags flags;
    const char* label;
};

/// Rows in table order: stage 1 only, + stage 2, + F_k^t concat, + residual, + stage 3.
inline std::vector<AblationVariant> ablation_variants()
{
    return {
        {{false, false, false, false}, "1st"},
        {{true, false, false, false}, "1st+2nd"},
        {{true, false, true, false}, "1st+2nd+concat"},
        {{true, false, true, true}, "1st+2nd+concat+res"},
        {{true, true, true, true}, "full"},
    };
}

struct AblationRow {
    AblationVariant variant;
    MetricsReport report;
};

inline constexpr const char* kAblateCsvHeader = "variant,stage1,stage2,concat,residual,stage3,epe3d,acc3dr";

/// Trains every variant from the same seed and budget (phase 1 only, no augmentation), then
/// evaluates its best-validation checkpoint on `eval_scenes`.
inline std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const TrainData& data,
                                           const std::vector<ScenePair>& eval_scenes,
                                           const std::function<void(const AblationRow&)>& on_row = {})
{
    std::vector<AblationRow> rows;
    for (const auto& v : ablation_variants()) {
        RunConfig vc = cfg;
        vc.net.flags = v.flags;
        vc.train.phase2_epochs = 0;
        vc.train.augment = false;
        vc.out_dir = (std::filesystem::path(cfg.out_dir) / v.label).string();
        echo_config(vc, std::filesystem::path(vc.out_dir) / "config.resolved");
        Trainer trainer(vc.net, vc.loss, effective_train_config(vc), vc.out_dir);
        trainer.run(data);
        const ParamStore<float> params = load_model(vc.net, trainer.best_path());
        EvalOptions eo;
        eo.points = cfg.eval_points;
        eo.seed = cfg.seed;
        eo.threads = cfg.threads;
        AblationRow row{v, aggregate(evaluate_scenes(params, vc.net, eval_scenes, eo))};
        if (on_row) on_row(row);
        rows.push_back(row);
    }
    return rows;
}

inline void write_ablate_row(std::ostream& os, const AblationRow& r)
{
    const EmbedFlags& f = r.variant.flags;
    os << r.variant.label << ",1," << f.stage2 << ',' << f.concat << ',' << f.residual << ',' << f.stage3 << ','
       << format_double(r.report.epe3d_m) << ',' << format_double(r.report.acc3dr) << '\n';
}

}  // namespace rmsflow
