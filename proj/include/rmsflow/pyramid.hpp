#pragma once

// Feature pyramid: lifted full-resolution features, a top-down pathway of random-sampling
// downsampling plus local feature aggregation, and a bottom-up pathway of nearest-neighbor
// upsampling with a channel projection and lateral connections.

#include <string>
#include <vector>

#include "rmsflow/layers.hpp"

namespace rmsflow {

/// Levels 0..L of one cloud. features[0] are the lifted inputs; features[1..L] are the
/// bottom-up outputs F_k. samples[k-1] selects level k's points from level k-1.
template <std::floating_point T>
struct Pyramid {
    std::vector<PointCloud> clouds;
    std::vector<Var> coords;
    std::vector<Var> features;
    std::vector<SampleIndex> samples;
};

namespace names {
inline std::string lift() { return "pyramid.lift"; }
inline std::string ds(std::size_t k) { return "pyramid.ds" + std::to_string(k); }
inline std::string lfa(std::size_t k) { return "pyramid.lfa" + std::to_string(k); }
inline std::string up(std::size_t k) { return "pyramid.up" + std::to_string(k); }
}  // namespace names

inline void declare_lfa(ParamLayout& layout, const std::string& prefix, std::size_t cin, std::size_t cout)
{
    layout.dense(prefix + ".pos", 10, cin);
    layout.attentive_pool(prefix + ".att0", 2 * cin, cout);
    layout.attentive_pool(prefix + ".att1", cout + cin, cout);
}

inline void declare_pyramid(ParamLayout& layout, const NetConfig& cfg)
{
    layout.dense(names::lift(), 3, cfg.c0);
    for (std::size_t k = 1; k <= cfg.depth(); ++k) {
        const std::size_t cin = k == 1 ? cfg.c0 : cfg.channels[k - 2];
        const std::size_t c = cfg.channels[k - 1];
        layout.dense(names::ds(k), cin, c);
        declare_lfa(layout, names::lfa(k), c, c);
    }
    for (std::size_t k = 1; k < cfg.depth(); ++k) {
        layout.dense(names::up(k) + ".tconv", cfg.channels[k], cfg.channels[k - 1]);
        layout.dense(names::up(k) + ".lateral", cfg.channels[k - 1], cfg.channels[k - 1], false);
    }
}

/// Local feature aggregation: K_p-NN within the cloud, relative-position encoding concatenated
/// with neighbor features, then two attentive pooling stages. Output [P, C_out].
template <std::floating_point T>
Var lfa(Net<T>& net, const std::string& prefix, const PointCloud& cloud, Var coords, Var features)
{
    if (cloud.empty()) throw SizeError("lfa: empty level");
    auto& tape = net.tape;
    const NeighborTable nt = neighbors(cloud, cloud, net.cfg.kp);
    const Var pos = net.act(net.dense(relpos_encoding(net, coords, coords, nt.index), prefix + ".pos"));
    const Var first = attentive_pool(net, concat_lastdim(tape, gather_rows(tape, features, nt.index), pos), prefix + ".att0");
    return attentive_pool(net, concat_lastdim(tape, gather_rows(tape, first, nt.index), pos), prefix + ".att1");
}

template <std::floating_point T>
struct LevelOut {
    PointCloud cloud;
    Var coords;
    Var features;
    SampleIndex sample;
};

/// Random-samples m points of the finer level and max-pools a dense projection of their
/// K_p nearest finer-level features.
template <std::floating_point T>
LevelOut<T> downsample(Net<T>& net, const std::string& prefix, const PointCloud& fine, Var fine_features,
                       std::size_t m, Rng& rng)
{
    auto& tape = net.tape;
    SampleIndex s = random_sample(fine, m, rng);
    PointCloud coarse = select(fine, s);
    const NeighborTable nt = neighbors(coarse, fine, net.cfg.kp);
    const Var h = net.act(net.dense(gather_rows(tape, fine_features, nt.index), prefix));
    const Var pooled = max_reduce(tape, h).values;
    const Var coords = net.constant(coarse.template as_tensor<T>());
    return {std::move(coarse), coords, pooled, std::move(s)};
}

/// Copies each fine point's nearest coarse feature (max over K_q if K_q > 1), projects it
/// ("transposed convolution" on points) and adds the projected lateral feature.
template <std::floating_point T>
Var upsample_tconv(Net<T>& net, const std::string& prefix, const PointCloud& coarse, Var coarse_features,
                   const PointCloud& fine, Var lateral)
{
    auto& tape = net.tape;
    if (coarse.empty()) throw SizeError("upsample_tconv: empty coarse level");
    if (tape.shape(lateral)[0] != fine.size()) {
        throw DimensionError("upsample_tconv: lateral has " + std::to_string(tape.shape(lateral)[0]) +
                             " rows, fine cloud " + std::to_string(fine.size()));
    }
    const NeighborTable nt = neighbors(fine, coarse, net.cfg.kq);
    const Var grouped = gather_rows(tape, coarse_features, nt.index);
    const std::size_t c = tape.shape(coarse_features)[1];
    const Var copied = nt.k() == 1 ? reshape(tape, grouped, {fine.size(), c}) : max_reduce(tape, grouped).values;
    return add(tape, net.dense(copied, prefix + ".tconv"), net.dense(lateral, prefix + ".lateral", false));
}

/// Full pyramid for one (already centered) cloud.
template <std::floating_point T>
Pyramid<T> build_pyramid(Net<T>& net, const PointCloud& cloud, Rng& rng)
{
    const auto& cfg = net.cfg;
    const auto& sizes = cfg.active_levels();
    if (cloud.size() < sizes.front()) {
        throw SizeError("build_pyramid: cloud has " + std::to_string(cloud.size()) + " points, level 1 needs " +
                        std::to_string(sizes.front()));
    }
    Pyramid<T> pyr;
    pyr.clouds.push_back(cloud);
    pyr.coords.push_back(net.constant(cloud.template as_tensor<T>()));
    pyr.features.push_back(net.act(net.dense(pyr.coords[0], names::lift())));

    std::vector<Var> top_down(cfg.depth() + 1);
    top_down[0] = pyr.features[0];
    for (std::size_t k = 1; k <= cfg.depth(); ++k) {
        LevelOut<T> lvl = downsample(net, names::ds(k), pyr.clouds[k - 1], top_down[k - 1], sizes[k - 1], rng);
        top_down[k] = lfa(net, names::lfa(k), lvl.cloud, lvl.coords, lvl.features);
        pyr.clouds.push_back(std::move(lvl.cloud));
        pyr.coords.push_back(lvl.coords);
        pyr.samples.push_back(std::move(lvl.sample));
    }
    pyr.features.resize(cfg.depth() + 1);
    pyr.features[cfg.depth()] = top_down[cfg.depth()];
    for (std::size_t k = cfg.depth() - 1; k >= 1; --k) {
        pyr.features[k] = upsample_tconv(net, names::up(k), pyr.clouds[k + 1], pyr.features[k + 1], pyr.clouds[k],
                                         top_down[k]);
    }
    return pyr;
}

/// Pyramids for both clouds with shared weights; sampling draws are independent and taken in
/// order (pc_t first) from the same generator.
template <std::floating_point T>
std::pair<Pyramid<T>, Pyramid<T>> build_pyramids(Net<T>& net, const PointCloud& pc_t, const PointCloud& pc_t1, Rng& rng)
{
    Pyramid<T> a = build_pyramid(net, pc_t, rng);
    Pyramid<T> b = build_pyramid(net, pc_t1, rng);
    return {std::move(a), std::move(b)};
}

}  // namespace rmsflow
