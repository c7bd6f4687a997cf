#pragma once

// Network configuration, parameter layout, and the layer helpers shared by the pyramid,
// flow-embedding and estimator code.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "rmsflow/geom.hpp"
#include "rmsflow/numcore.hpp"
#include "rmsflow/rng.hpp"

namespace rmsflow {

/// Independently switchable parts of the flow-embedding block.
struct EmbedFlags {
    bool stage2 = true;    // point-to-patch attentive aggregation
    bool stage3 = true;    // point-to-dilated-patch aggregation
    bool concat = true;    // concatenate F_k^t to the first embedding, then project
    bool residual = true;  // add the input of the last attentive stage to its output

    bool operator==(const EmbedFlags&) const = default;
};

struct NetConfig {
    std::vector<std::size_t> levels{2048, 728, 320};         // l_1..l_L
    std::vector<std::size_t> dense_levels{8192, 2048, 512};  // used when `dense` is set
    bool dense = false;
    std::size_t c0 = 32;                                      // lifted width at full resolution
    std::vector<std::size_t> channels{128, 256, 512};        // C_1..C_L
    std::size_t kp = 17;                                      // same-cloud neighbors
    std::size_t kq = 1;                                       // upsampling neighbors
    std::size_t ko = 33;                                      // cross-cloud neighbors
    std::size_t est_hidden1 = 64;
    std::size_t est_hidden2 = 32;
    double est_out_scale = 0.1;  // init scale of each estimator's output layer
    double slope = 0.1;
    EmbedFlags flags;

    std::size_t depth() const { return channels.size(); }
    const std::vector<std::size_t>& active_levels() const { return dense ? dense_levels : levels; }

    /// Number of points required in each input cloud.
    std::size_t min_points() const { return active_levels().front(); }

    void validate() const
    {
        auto check_levels = [this](const std::vector<std::size_t>& l, const char* what) {
            if (l.size() != channels.size()) {
                throw ConfigError(std::string(what) + ": need one size per channel entry");
            }
            for (std::size_t i = 0; i < l.size(); ++i) {
                if (l[i] < 1 || (i > 0 && l[i] >= l[i - 1])) {
                    throw ConfigError(std::string(what) + ": level sizes must be strictly decreasing and >= 1");
                }
            }
        };
        if (channels.empty()) throw ConfigError("network needs at least one coarse level");
        check_levels(levels, "pyramid levels");
        check_levels(dense_levels, "dense pyramid levels");
        for (std::size_t c : channels) {
            if (c == 0) throw ConfigError("channel widths must be positive");
        }
        if (c0 == 0 || kp == 0 || kq == 0 || ko == 0) throw ConfigError("c0, K_p, K_q and K_o must be positive");
        if (!(slope >= 0.0 && slope < 1.0)) throw ConfigError("activation slope must lie in [0,1)");
        if (!(est_out_scale >= 0.0)) throw ConfigError("estimator output init scale must be >= 0");
    }
};

/// Ordered (name, shape) list describing every learnable tensor.
class ParamLayout {
public:
    struct Item {
        std::string name;
        Shape shape;
        double init_scale = 1.0;
    };

    void add(std::string name, Shape shape, double init_scale = 1.0)
    {
        items_.push_back({std::move(name), std::move(shape), init_scale});
    }

    /// Weight [in, out] and optional bias [out] under `prefix`.w / `prefix`.b.
    void dense(const std::string& prefix, std::size_t in, std::size_t out, bool bias = true, double init_scale = 1.0)
    {
        add(prefix + ".w", {in, out}, init_scale);
        if (bias) add(prefix + ".b", {out});
    }

    /// Score projection (no bias: a per-channel offset cancels in the softmax) and output layer.
    void attentive_pool(const std::string& prefix, std::size_t in, std::size_t out)
    {
        dense(prefix + ".score", in, in, false);
        dense(prefix + ".fc", in, out);
    }

    const std::vector<Item>& items() const { return items_; }

    /// Kaiming-uniform weights times the item's scale, zero biases, drawn in layout order.
    ParamStore<float> init(std::uint64_t seed) const
    {
        Rng rng(seed);
        ParamStore<float> store;
        for (const auto& it : items_) {
            if (it.shape.size() == 2) {
                Tensor<float> w = kaiming_uniform<float>(it.shape[0], it.shape[1], rng);
                for (float& v : w.data) v = static_cast<float>(v * it.init_scale);
                store.add(it.name, std::move(w));
            } else {
                store.add(it.name, Tensor<float>(it.shape));
            }
        }
        return store;
    }

private:
    std::vector<Item> items_;
};

/// Graph-building context: a tape, the weights, and the configuration.
template <std::floating_point T>
struct Net {
    Tape<T>& tape;
    const ParamStore<T>& params;
    const NetConfig& cfg;
    bool track_grad = true;

    Var p(const std::string& name)
    {
        if (track_grad) return tape.param(params, name);
        return tape.constant(params.value(name));
    }

    Var constant(Tensor<T> t) { return tape.constant(std::move(t)); }

    Var dense(Var x, const std::string& prefix, bool bias = true)
    {
        return linear(tape, x, p(prefix + ".w"), bias ? p(prefix + ".b") : Var{});
    }

    Var act(Var x) { return leaky_relu(tape, x, static_cast<T>(cfg.slope)); }

    const Tensor<T>& value(Var v) const { return tape.value(v); }

    /// Copy of a [P, 3] coordinate node as a float cloud, for neighbor search.
    PointCloud cloud_of(Var coords) const
    {
        const auto& v = tape.value(coords).data;
        return PointCloud(std::vector<float>(v.begin(), v.end()));
    }
};

/// Nearest-neighbor table used by every layer. Exact; identical to knn_brute.
/// Non-finite coordinates can only come from a blown-up flow estimate, hence DivergenceError.
inline NeighborTable neighbors(const PointCloud& queries, const PointCloud& targets, std::size_t k)
{
    for (const PointCloud* pc : {&queries, &targets}) {
        for (float v : pc->xyz) {
            if (!std::isfinite(v)) throw DivergenceError("non-finite coordinates reached a neighbor search");
        }
    }
    return knn_accel(queries, targets, std::min(k, targets.size()));
}

/// 10-value relative position encoding per (center, neighbor) pair:
/// center xyz, neighbor xyz, offset, Euclidean distance. Output [P, K, 10].
template <std::floating_point T>
Var relpos_encoding(Net<T>& net, Var centers, Var targets, const IndexTable& table)
{
    auto& tape = net.tape;
    const Var c = gather_rows(tape, centers, IndexTable::self(table.rows, table.cols));
    const Var n = gather_rows(tape, targets, table);
    const Var off = sub(tape, n, c);
    const Var dist = row_norm(tape, off);
    const Var parts[] = {c, n, off, dist};
    return concat_lastdim(tape, std::span<const Var>(parts));
}

/// grouped [P, K, C] -> per-channel softmax scores over K -> weighted sum -> dense + activation.
template <std::floating_point T>
Var attentive_pool(Net<T>& net, Var grouped, const std::string& prefix)
{
    auto& tape = net.tape;
    const Var scores = softmax_neighbors(tape, net.dense(grouped, prefix + ".score", false));
    const Var pooled = sum_neighbors(tape, mul(tape, scores, grouped));
    return net.act(net.dense(pooled, prefix + ".fc"));
}

}  // namespace rmsflow
