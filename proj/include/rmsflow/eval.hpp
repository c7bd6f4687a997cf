#pragma once

// Scene-level evaluation: subsample, predict the full-resolution flow, score it.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <exception>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "rmsflow/data.hpp"
#include "rmsflow/metrics.hpp"
#include "rmsflow/predictor.hpp"

namespace rmsflow {

struct SceneResult {
    std::string scene_id;
    MetricsReport report;
    double infer_ms = 0.0;
    double mean_flow_norm = 0.0;  // mean |SF_0|, meters
};

struct EvalOptions {
    std::size_t points = 8192;
    std::uint64_t seed = 1;
    bool oracle = false;  // score the ground truth against itself (pipeline self-test)
    std::size_t threads = 1;
};

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers; each index is handled exactly once.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn)
{
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::jthread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += threads) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    pool.clear();
    if (error) std::rethrow_exception(error);
}

/// The i-th evaluation draw: subsample seed and network seed depend only on (seed, i, points).
inline SceneResult evaluate_scene(const ParamStore<float>& params, const NetConfig& cfg, const ScenePair& scene,
                                  std::size_t index, const EvalOptions& opt)
{
    Rng sub_rng(derive_seed(opt.seed, {seed_tag::eval, seed_tag::subsample, index, opt.points}));
    const ScenePair s = subsample_pair(scene, opt.points, sub_rng);
    SceneResult r;
    r.scene_id = scene.scene_id;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<float> flow;
    if (opt.oracle) {
        flow = s.gt_flow;
    } else {
        Rng net_rng(derive_seed(opt.seed, {seed_tag::eval, seed_tag::network, index, opt.points}));
        flow = predict(params, cfg, s.pc_t, s.pc_t1, net_rng).flows[0];
    }
    r.infer_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    r.report = evaluate_flow(flow, s.gt_flow);
    double sum = 0.0;
    for (std::size_t i = 0; i < flow.size(); i += 3) {
        sum += std::sqrt(double(flow[i]) * flow[i] + double(flow[i + 1]) * flow[i + 1] + double(flow[i + 2]) * flow[i + 2]);
    }
    r.mean_flow_norm = flow.empty() ? 0.0 : sum / static_cast<double>(flow.size() / 3);
    return r;
}

inline std::vector<SceneResult> evaluate_scenes(const ParamStore<float>& params, const NetConfig& cfg,
                                                const std::vector<ScenePair>& scenes, const EvalOptions& opt)
{
    std::vector<SceneResult> out(scenes.size());
    parallel_for(scenes.size(), opt.threads, [&](std::size_t i) { out[i] = evaluate_scene(params, cfg, scenes[i], i, opt); });
    return out;
}

inline MetricsReport aggregate(const std::vector<SceneResult>& results)
{
    std::vector<MetricsReport> r;
    r.reserve(results.size());
    for (const auto& s : results) r.push_back(s.report);
    return merge_reports(r);
}

inline std::string format_double(double v, const char* fmt = "%.6f")
{
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

inline constexpr const char* kEvalCsvHeader = "scene_id,N,epe3d,acc3ds,acc3dr,out3d,infer_ms";

/// One CSV row per scene plus an "ALL" row with the point-weighted aggregate.
inline void write_eval_rows(std::ostream& os, const std::vector<SceneResult>& results, std::size_t points,
                            bool timing)
{
    auto row = [&](const std::string& id, const MetricsReport& m, double ms) {
        os << id << ',' << points << ',' << format_double(m.epe3d_m) << ',' << format_double(m.acc3ds) << ','
           << format_double(m.acc3dr) << ',' << format_double(m.out3d) << ','
           << format_double(timing ? ms : 0.0, "%.3f") << '\n';
    };
    double total_ms = 0.0;
    for (const auto& r : results) {
        row(r.scene_id, r.report, r.infer_ms);
        total_ms += r.infer_ms;
    }
    row("ALL", aggregate(results), results.empty() ? 0.0 : total_ms / static_cast<double>(results.size()));
}

}  // namespace rmsflow
