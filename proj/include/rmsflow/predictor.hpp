#pragma once

// Coarse-to-fine scene flow: flow estimation at the coarsest level, then per finer level
// nearest-neighbor upsampling, warping, embedding on warped queries and a residual estimate.
// The full-resolution flow comes from a fourth estimator on upsampled features.

#include <span>
#include <string>
#include <vector>

#include "rmsflow/flowembed.hpp"
#include "rmsflow/pyramid.hpp"

namespace rmsflow {

struct LossWeights {
    std::vector<double> alpha{0.02, 0.04, 0.08, 0.16};  // alpha_0..alpha_L

    void validate(std::size_t depth) const
    {
        if (alpha.size() != depth + 1) throw ConfigError("loss weights: need one alpha per level 0..L");
        for (double a : alpha) {
            if (!(a > 0.0)) throw ConfigError("loss weights must be positive");
        }
    }
};

namespace names {
inline std::string est(std::size_t k) { return "est" + std::to_string(k); }
}  // namespace names

/// Estimator input width at each level: FE output, plus upsampled coarser FE output below L;
/// level 0 sees upsampled level-1 embedding plus the lifted input features.
inline std::size_t estimator_width(const NetConfig& cfg, std::size_t k)
{
    if (k == 0) return cfg.channels[0] + cfg.c0;
    if (k == cfg.depth()) return cfg.channels[k - 1];
    return cfg.channels[k - 1] + cfg.channels[k];
}

inline ParamLayout declare_network(const NetConfig& cfg)
{
    cfg.validate();
    ParamLayout layout;
    declare_pyramid(layout, cfg);
    for (std::size_t k = 1; k <= cfg.depth(); ++k) {
        declare_flow_embedding(layout, names::fe(k), cfg.channels[k - 1], cfg.flags);
    }
    for (std::size_t k = 0; k <= cfg.depth(); ++k) {
        layout.dense(names::est(k) + ".fc0", estimator_width(cfg, k), cfg.est_hidden1);
        layout.dense(names::est(k) + ".fc1", cfg.est_hidden1, cfg.est_hidden2);
        layout.dense(names::est(k) + ".fc2", cfg.est_hidden2, 3, true, cfg.est_out_scale);
    }
    return layout;
}

inline ParamStore<float> init_params(const NetConfig& cfg, std::uint64_t seed)
{
    return declare_network(cfg).init(derive_seed(seed, {seed_tag::init}));
}

/// p + flow, row by row.
inline PointCloud warp(const PointCloud& pc, std::span<const float> flow)
{
    if (flow.size() != pc.xyz.size()) {
        throw DimensionError("warp: cloud has " + std::to_string(pc.size()) + " rows, flow " +
                             std::to_string(flow.size() / 3));
    }
    std::vector<float> out(pc.xyz.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pc.xyz[i] + flow[i];
    return PointCloud(std::move(out));
}

/// Per-point MLP: dense(64) -> dense(32) -> dense(3), the last layer linear.
template <std::floating_point T>
Var estimate_flow(Net<T>& net, const std::string& prefix, Var features)
{
    Var h = net.act(net.dense(features, prefix + ".fc0"));
    h = net.act(net.dense(h, prefix + ".fc1"));
    return net.dense(h, prefix + ".fc2");
}

template <std::floating_point T>
struct Upsampled {
    Var flow;
    Var features;
};

/// Nearest-coarse-point copy of both flow and features onto the fine cloud.
template <std::floating_point T>
Upsampled<T> upsample_flow_feats(Net<T>& net, Var coarse_flow, Var coarse_features, const PointCloud& coarse,
                                 const PointCloud& fine)
{
    auto& tape = net.tape;
    if (coarse.empty()) throw SizeError("upsample_flow_feats: empty coarse level");
    const NeighborTable nt = neighbors(fine, coarse, 1);
    const Var f = reshape(tape, gather_rows(tape, coarse_flow, nt.index), {fine.size(), 3});
    const std::size_t c = tape.shape(coarse_features)[1];
    const Var g = reshape(tape, gather_rows(tape, coarse_features, nt.index), {fine.size(), c});
    return {f, g};
}

template <std::floating_point T>
struct ForwardResult {
    std::vector<Var> flows;                 // flows[k] = SF_k, [l_k, 3], k = 0..L
    std::vector<SampleIndex> samples;       // samples[k-1]: level k of PC^t from level k-1
    std::vector<PointCloud> clouds_t;       // PC_k^t, centered coordinates
    std::array<double, 3> origin{};         // subtracted from both inputs
};

/// Centroid of pc_t; both clouds are expressed relative to it so only relative geometry matters.
inline std::array<double, 3> scene_origin(const PointCloud& pc_t)
{
    std::array<double, 3> o{};
    for (std::size_t i = 0; i < pc_t.size(); ++i) {
        for (int a = 0; a < 3; ++a) o[a] += pc_t.xyz[3 * i + a];
    }
    for (double& v : o) v /= static_cast<double>(pc_t.size());
    return o;
}

inline PointCloud recenter(const PointCloud& pc, const std::array<double, 3>& origin)
{
    std::vector<float> out(pc.xyz.size());
    for (std::size_t i = 0; i < pc.size(); ++i) {
        for (int a = 0; a < 3; ++a) out[3 * i + a] = static_cast<float>(pc.xyz[3 * i + a] - origin[a]);
    }
    return PointCloud(std::move(out));
}

template <std::floating_point T>
ForwardResult<T> forward(Net<T>& net, const PointCloud& pc_t_in, const PointCloud& pc_t1_in, Rng& rng)
{
    const NetConfig& cfg = net.cfg;
    auto& tape = net.tape;
    const std::size_t depth = cfg.depth();
    if (pc_t_in.size() < cfg.min_points() || pc_t1_in.size() < cfg.min_points()) {
        throw SizeError("forward: clouds need at least " + std::to_string(cfg.min_points()) + " points (got " +
                        std::to_string(pc_t_in.size()) + ", " + std::to_string(pc_t1_in.size()) + ")");
    }
    ForwardResult<T> out;
    out.origin = scene_origin(pc_t_in);
    auto [pt, pt1] = build_pyramids(net, recenter(pc_t_in, out.origin), recenter(pc_t1_in, out.origin), rng);

    out.flows.resize(depth + 1);
    std::vector<Var> embed(depth + 1);

    embed[depth] = flow_embedding(net, names::fe(depth), pt.clouds[depth], pt.coords[depth], pt.features[depth],
                                  pt1.clouds[depth], pt1.coords[depth], pt1.features[depth], pt.coords[depth]);
    out.flows[depth] = estimate_flow(net, names::est(depth), embed[depth]);

    for (std::size_t k = depth - 1; k >= 1; --k) {
        const Upsampled<T> up = upsample_flow_feats(net, out.flows[k + 1], embed[k + 1], pt.clouds[k + 1], pt.clouds[k]);
        const Var warped = add(tape, pt.coords[k], up.flow);
        embed[k] = flow_embedding(net, names::fe(k), pt.clouds[k], pt.coords[k], pt.features[k], pt1.clouds[k],
                                  pt1.coords[k], pt1.features[k], warped);
        const Var residual = estimate_flow(net, names::est(k), concat_lastdim(tape, embed[k], up.features));
        out.flows[k] = add(tape, up.flow, residual);
    }

    const Upsampled<T> up0 = upsample_flow_feats(net, out.flows[1], embed[1], pt.clouds[1], pt.clouds[0]);
    const Var residual0 = estimate_flow(net, names::est(0), concat_lastdim(tape, up0.features, pt.features[0]));
    out.flows[0] = add(tape, up0.flow, residual0);

    out.samples = std::move(pt.samples);
    out.clouds_t = std::move(pt.clouds);
    return out;
}

/// Ground truth at every level by composing the sample indices (levels are exact subsets).
inline std::vector<std::vector<float>> gt_at_levels(std::span<const float> gt_full,
                                                    const std::vector<SampleIndex>& samples)
{
    std::vector<std::vector<float>> out;
    out.emplace_back(gt_full.begin(), gt_full.end());
    for (const SampleIndex& s : samples) {
        const auto& prev = out.back();
        if (s.source_size * 3 != prev.size()) {
            throw DimensionError("gt_at_levels: sample chain expects " + std::to_string(s.source_size) +
                                 " rows, ground truth has " + std::to_string(prev.size() / 3));
        }
        std::vector<float> next;
        next.reserve(3 * s.size());
        for (std::uint32_t r : s.indices) next.insert(next.end(), prev.begin() + 3 * r, prev.begin() + 3 * r + 3);
        out.push_back(std::move(next));
    }
    return out;
}

/// L = sum_k alpha_k * sum_i || sf_ki - gt_ki ||_2
template <std::floating_point T>
Var multiscale_loss(Tape<T>& tape, const std::vector<Var>& flows, const std::vector<std::vector<float>>& gts,
                    const LossWeights& weights)
{
    if (flows.size() != gts.size() || flows.size() != weights.alpha.size()) {
        throw DimensionError("multiscale_loss: " + std::to_string(flows.size()) + " flow levels, " +
                             std::to_string(gts.size()) + " ground-truth levels, " +
                             std::to_string(weights.alpha.size()) + " weights");
    }
    Var total;
    for (std::size_t k = 0; k < flows.size(); ++k) {
        const Shape& s = tape.shape(flows[k]);
        if (s.size() != 2 || s[1] != 3 || s[0] * 3 != gts[k].size()) {
            throw DimensionError("multiscale_loss: level " + std::to_string(k) + " flow " + shape_str(s) +
                                 " vs ground truth rows " + std::to_string(gts[k].size() / 3));
        }
        const Var gt = tape.constant(Tensor<T>(s, std::vector<T>(gts[k].begin(), gts[k].end())));
        const Var term = scale(tape, sum_all(tape, row_norm(tape, sub(tape, flows[k], gt))),
                               static_cast<T>(weights.alpha[k]));
        total = total.valid() ? add(tape, total, term) : term;
    }
    return total;
}

/// Inference convenience: full-resolution flow as floats, plus the per-level flows.
struct Prediction {
    std::vector<std::vector<float>> flows;  // k = 0..L
    std::vector<SampleIndex> samples;
};

inline Prediction predict(const ParamStore<float>& params, const NetConfig& cfg, const PointCloud& pc_t,
                          const PointCloud& pc_t1, Rng& rng)
{
    Tape<float> tape;
    Net<float> net{tape, params, cfg, false};
    ForwardResult<float> r = forward(net, pc_t, pc_t1, rng);
    Prediction p;
    for (Var f : r.flows) { const auto& d = tape.value(f).data; p.flows.emplace_back(d.begin(), d.end()); }
    p.samples = std::move(r.samples);
    return p;
}

}  // namespace rmsflow
