#pragma once

// Patch-to-dilated-patch flow embedding: a cross-cloud max embedding followed by two attentive
// same-cloud aggregations that share one K_p neighbor table, with an optional F_k^t
// concatenation and a residual connection.

#include <string>

#include "rmsflow/layers.hpp"

namespace rmsflow {

namespace names {
inline std::string fe(std::size_t k) { return "fe" + std::to_string(k); }
}  // namespace names

inline void declare_flow_embedding(ParamLayout& layout, const std::string& prefix, std::size_t c, const EmbedFlags& f)
{
    layout.dense(prefix + ".s1.mlp0", 2 * c + 4, c);
    layout.dense(prefix + ".s1.mlp1", c, c);
    if (f.concat) layout.dense(prefix + ".cat", 2 * c, c);
    if (f.stage2) {
        layout.dense(prefix + ".s2.pos", 10, c);
        layout.attentive_pool(prefix + ".s2.att", 2 * c, c);
    }
    if (f.stage2 && f.stage3) {
        layout.dense(prefix + ".s3.pos", 10, c);
        layout.attentive_pool(prefix + ".s3.att", 2 * c, c);
    }
}

/// First embedding. For each query: K_o nearest points of PC^{t+1}; per neighbor
/// [query feature, neighbor feature, offset, distance] -> two dense layers -> max over K_o.
/// `queries` are PC_k^t coordinates or their warped positions and may carry gradients.
template <std::floating_point T>
Var embed_patch_to_point(Net<T>& net, const std::string& prefix, Var queries, const PointCloud& pc_t1,
                         Var coords_t1, Var features_t1, Var features_t)
{
    auto& tape = net.tape;
    if (pc_t1.empty()) throw SizeError("embed_patch_to_point: empty target cloud");
    const std::size_t l = tape.shape(queries)[0];
    if (tape.shape(features_t)[0] != l) throw DimensionError("embed_patch_to_point: query/feature row mismatch");
    const NeighborTable nt = neighbors(net.cloud_of(queries), pc_t1, net.cfg.ko);
    const IndexTable self = IndexTable::self(l, nt.k());
    const Var off = sub(tape, gather_rows(tape, coords_t1, nt.index), gather_rows(tape, queries, self));
    const Var parts[] = {gather_rows(tape, features_t, self), gather_rows(tape, features_t1, nt.index), off,
                         row_norm(tape, off)};
    Var h = net.act(net.dense(concat_lastdim(tape, std::span<const Var>(parts)), prefix + ".s1.mlp0"));
    h = net.act(net.dense(h, prefix + ".s1.mlp1"));
    return max_reduce(tape, h).values;
}

/// Attentive aggregation of `features` over a same-cloud neighbor table, with the relative
/// position encoding of each neighbor. `stage` names the weight group ("s2" or "s3").
template <std::floating_point T>
Var embed_attentive(Net<T>& net, const std::string& prefix, const std::string& stage, Var coords,
                    const NeighborTable& nt, Var features)
{
    auto& tape = net.tape;
    const Var pos = net.act(net.dense(relpos_encoding(net, coords, coords, nt.index), prefix + "." + stage + ".pos"));
    return attentive_pool(net, concat_lastdim(tape, gather_rows(tape, features, nt.index), pos),
                          prefix + "." + stage + ".att");
}

/// Second embedding: aggregate the K_p nearest features within PC_k^t by attention.
template <std::floating_point T>
Var embed_point_to_patch(Net<T>& net, const std::string& prefix, Var coords_t, const NeighborTable& nt, Var e1)
{
    return embed_attentive(net, prefix, "s2", coords_t, nt, e1);
}

/// Third embedding: repeat the aggregation on the second embedding with new weights, so each
/// output sees neighbors of neighbors. With `residual`, the input is added to the result.
template <std::floating_point T>
Var embed_dilated(Net<T>& net, const std::string& prefix, Var coords_t, const NeighborTable& nt, Var e2, bool residual)
{
    const Var agg = embed_attentive(net, prefix, "s3", coords_t, nt, e2);
    return residual ? add(net.tape, agg, e2) : agg;
}

/// Whole embedding block at one level.
template <std::floating_point T>
Var flow_embedding(Net<T>& net, const std::string& prefix, const PointCloud& pc_t, Var coords_t, Var features_t,
                   const PointCloud& pc_t1, Var coords_t1, Var features_t1, Var queries)
{
    auto& tape = net.tape;
    const EmbedFlags& f = net.cfg.flags;
    const Var e1 = embed_patch_to_point(net, prefix, queries, pc_t1, coords_t1, features_t1, features_t);
    Var x = e1;
    if (f.concat) x = net.act(net.dense(concat_lastdim(tape, e1, features_t), prefix + ".cat"));
    if (!f.stage2) return x;
    const NeighborTable nt = neighbors(pc_t, pc_t, net.cfg.kp);
    if (!f.stage3) {
        const Var e2 = embed_point_to_patch(net, prefix, coords_t, nt, x);
        return f.residual ? add(tape, e2, x) : e2;
    }
    const Var e2 = embed_point_to_patch(net, prefix, coords_t, nt, x);
    return embed_dilated(net, prefix, coords_t, nt, e2, f.residual);
}

}  // namespace rmsflow
