#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "net_util.hpp"

using namespace rmsflow;
using namespace rmsflow::testing;

namespace {

constexpr std::size_t kC = 4;

struct Scene {
    PointCloud pc_t, pc_t1;
    Tensor<double> f_t, f_t1;
};

Scene random_scene(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    Scene s{random_cloud(n, rng), random_cloud(n + 3, rng), {}, {}};
    s.f_t = random_tensor({n, kC}, rng);
    s.f_t1 = random_tensor({n + 3, kC}, rng);
    return s;
}

ParamStore<double> fe_params(const EmbedFlags& flags, std::uint64_t seed = 31)
{
    ParamLayout layout;
    declare_flow_embedding(layout, "fe", kC, flags);
    return random_params(layout, seed);
}

NetConfig config_with(const EmbedFlags& flags)
{
    NetConfig c = tiny_config();
    c.flags = flags;
    return c;
}

Tensor<double> run_fe(const ParamStore<double>& p, const NetConfig& cfg, const Scene& s)
{
    Tape<double> tape;
    Net<double> net{tape, p, cfg, false};
    const Var ct = net.constant(s.pc_t.as_tensor<double>());
    return tape.value(flow_embedding(net, "fe", s.pc_t, ct, net.constant(s.f_t), s.pc_t1,
                                     net.constant(s.pc_t1.as_tensor<double>()), net.constant(s.f_t1), ct));
}

/// Stage-2 output, optionally followed by stage 3, on given first-embedding features.
Tensor<double> run_stages(const ParamStore<double>& p, const NetConfig& cfg, const PointCloud& pc, const Tensor<double>& x,
                          bool dilated)
{
    Tape<double> tape;
    Net<double> net{tape, p, cfg, false};
    const Var c = net.constant(pc.as_tensor<double>());
    const NeighborTable nt = neighbors(pc, pc, cfg.kp);
    Var out = embed_point_to_patch(net, "fe", c, nt, net.constant(x));
    if (dilated) out = embed_dilated(net, "fe", c, nt, out, cfg.flags.residual);
    return tape.value(out);
}

bool row_changed(const Tensor<double>& a, const Tensor<double>& b, std::size_t row)
{
    const std::size_t c = a.size() / a.shape[0];
    for (std::size_t j = 0; j < c; ++j) {
        if (a.data[row * c + j] != b.data[row * c + j]) return true;
    }
    return false;
}

}  // namespace

TEST(PatchToPoint, CoincidentCloudsGiveEqualRows)
{
    const EmbedFlags flags;
    const auto p = fe_params(flags);
    const auto cfg = config_with(flags);
    const PointCloud pc(std::vector<float>(3 * 9, -0.4f));
    const Tensor<double> f({9, kC}, 0.25);
    Tape<double> tape;
    Net<double> net{tape, p, cfg, false};
    const Var c = net.constant(pc.as_tensor<double>());
    const auto out = tape.value(embed_patch_to_point(net, "fe", c, pc, c, net.constant(f), net.constant(f)));
    for (std::size_t i = 1; i < 9; ++i) {
        for (std::size_t j = 0; j < kC; ++j) EXPECT_EQ(out.data[i * kC + j], out.data[j]);
    }
}

TEST(PatchToPoint, SingleNeighborIsMlpOfSolePair)
{
    const EmbedFlags flags;
    const auto p = fe_params(flags);
    auto cfg = config_with(flags);
    cfg.ko = 1;
    const Scene s = random_scene(12, 1);
    Tape<double> tape;
    Net<double> net{tape, p, cfg, false};
    const Var ct = net.constant(s.pc_t.as_tensor<double>());
    const auto out = tape.value(embed_patch_to_point(net, "fe", ct, s.pc_t1, net.constant(s.pc_t1.as_tensor<double>()),
                                                     net.constant(s.f_t1), net.constant(s.f_t)));

    // independent recomputation: nearest target by brute force, then the two layers by hand
    const auto nn = knn_brute(s.pc_t, s.pc_t1, 1);
    const auto& w0 = p.value("fe.s1.mlp0.w");
    const auto& b0 = p.value("fe.s1.mlp0.b");
    const auto& w1 = p.value("fe.s1.mlp1.w");
    const auto& b1 = p.value("fe.s1.mlp1.b");
    auto lrelu = [](double v) { return v > 0 ? v : 0.1 * v; };
    for (std::size_t i = 0; i < 12; ++i) {
        const std::uint32_t j = nn.index.at(i, 0);
        std::vector<double> in;
        for (std::size_t c = 0; c < kC; ++c) in.push_back(s.f_t.data[i * kC + c]);
        for (std::size_t c = 0; c < kC; ++c) in.push_back(s.f_t1.data[j * kC + c]);
        double d2 = 0;
        for (int a = 0; a < 3; ++a) {
            const double o = double(s.pc_t1.xyz[3 * j + a]) - double(s.pc_t.xyz[3 * i + a]);
            in.push_back(o);
            d2 += o * o;
        }
        in.push_back(std::sqrt(d2));
        std::vector<double> h(kC), o(kC);
        for (std::size_t c = 0; c < kC; ++c) {
            double v = b0.data[c];
            for (std::size_t r = 0; r < in.size(); ++r) v += in[r] * w0.data[r * kC + c];
            h[c] = lrelu(v);
        }
        for (std::size_t c = 0; c < kC; ++c) {
            double v = b1.data[c];
            for (std::size_t r = 0; r < kC; ++r) v += h[r] * w1.data[r * kC + c];
            EXPECT_NEAR(out.data[i * kC + c], lrelu(v), 1e-12);
        }
    }
}

TEST(PatchToPoint, Errors)
{
    const EmbedFlags flags;
    const auto p = fe_params(flags);
    const auto cfg = config_with(flags);
    const Scene s = random_scene(10, 2);
    Tape<double> tape;
    Net<double> net{tape, p, cfg, false};
    const Var ct = net.constant(s.pc_t.as_tensor<double>());
    EXPECT_THROW(embed_patch_to_point(net, "fe", ct, PointCloud{}, net.constant(Tensor<double>({0, 3})),
                                      net.constant(Tensor<double>({0, kC})), net.constant(s.f_t)),
                 SizeError);
    EXPECT_THROW(embed_patch_to_point(net, "fe", ct, s.pc_t1, net.constant(s.pc_t1.as_tensor<double>()),
                                      net.constant(s.f_t1), net.constant(Tensor<double>({9, kC}))),
                 DimensionError);
}

TEST(PatchToPoint, GradientCheckOn32Points)
{
    const EmbedFlags flags;
    const auto p = fe_params(flags);
    const auto cfg = config_with(flags);
    const Scene s = random_scene(32, 3);
    const NetLossFn loss = [&](Net<double>& net) {
        const Var ct = net.constant(s.pc_t.as_tensor<double>());
        return weighted_sum(net.tape, embed_patch_to_point(net, "fe", ct, s.pc_t1,
                                                           net.constant(s.pc_t1.as_tensor<double>()),
                                                           net.constant(s.f_t1), net.constant(s.f_t)));
    };
    const auto r = param_grad_check(p, cfg, loss, "fe.s1", 1000);
    EXPECT_LT(r.max_rel, 1e-4);
    EXPECT_GT(r.checked, 40u);
}

TEST(PointToPatch, SingleNeighborIsProjectedOwnFeature)
{
    const EmbedFlags flags;
    const auto p = fe_params(flags);
    auto cfg = config_with(flags);
    cfg.kp = 1;
    const Scene s = random_scene(10, 4);
    const auto out = run_stages(p, cfg, s.pc_t, s.f_t, false);

    Tape<double> tape;
    Net<double> net{tape, p, cfg, false};
    const Var c = net.constant(s.pc_t.as_tensor<double>());
    const IndexTable self = IndexTable::self(10, 1);
    const Var pos = net.act(net.dense(reshape(tape, relpos_encoding(net, c, c, self), {10, 10}), "fe.s2.pos"));
    const auto ref =
        tape.value(net.act(net.dense(concat_lastdim(tape, net.constant(s.f_t), pos), "fe.s2.att.fc")));
    EXPECT_LT(max_abs_diff(out.data, ref.data), 1e-12);
}

TEST(PointToPatch, UniformInputsOnCoincidentPoints)
{
    // the position encoding makes outputs depend on geometry, so uniformity needs equal positions too
    const EmbedFlags flags;
    const auto p = fe_params(flags);
    const auto cfg = config_with(flags);
    const PointCloud pc(std::vector<float>(3 * 8, 1.5f));
    const auto out = run_stages(p, cfg, pc, Tensor<double>({8, kC}, -0.3), false);
    for (std::size_t i = 1; i < 8; ++i) {
        for (std::size_t j = 0; j < kC; ++j) EXPECT_EQ(out.data[i * kC + j], out.data[j]);
    }
}

TEST(PointToPatch, NeighborOrderInvariance)
{
    const EmbedFlags flags;
    const auto p = fe_params(flags);
    const auto cfg = config_with(flags);
    const Scene s = random_scene(30, 5);
    Rng rng(6);
    NeighborTable nt = neighbors(s.pc_t, s.pc_t, cfg.kp);
    NeighborTable shuffled = nt;
    for (std::size_t i = 0; i < nt.rows(); ++i) {
        std::shuffle(shuffled.index.idx.begin() + i * nt.k(), shuffled.index.idx.begin() + (i + 1) * nt.k(), rng);
    }
    auto run = [&](const NeighborTable& t) {
        Tape<double> tape;
        Net<double> net{tape, p, cfg, false};
        const Var c = net.constant(s.pc_t.as_tensor<double>());
        const Var e2 = embed_point_to_patch(net, "fe", c, t, net.constant(s.f_t));
        Tensor<double> v2 = tape.value(e2);
        return std::pair{std::move(v2), tape.value(embed_dilated(net, "fe", c, t, e2, true))};
    };
    const auto [a2, a3] = run(nt);
    const auto [b2, b3] = run(shuffled);
    EXPECT_LT(rel_diff(b2.data, a2.data), 1e-5);
    EXPECT_LT(rel_diff(b3.data, a3.data), 1e-5);
}

TEST(Dilated, ZeroAggregationWeightsGiveResidualIdentity)
{
    const EmbedFlags flags;
    auto p = fe_params(flags);
    for (const char* n : {"fe.s3.att.fc.w", "fe.s3.att.fc.b"}) {
        for (double& v : p.value(n).data) v = 0.0;
    }
    const auto cfg = config_with(flags);
    const Scene s = random_scene(20, 7);
    EXPECT_EQ(run_stages(p, cfg, s.pc_t, s.f_t, true), run_stages(p, cfg, s.pc_t, s.f_t, false));

    // same property through the whole block: output equals the stage-2 output
    Tape<double> tape;
    Net<double> net{tape, p, cfg, false};
    const Var ct = net.constant(s.pc_t.as_tensor<double>());
    const Var e1 = embed_patch_to_point(net, "fe", ct, s.pc_t1, net.constant(s.pc_t1.as_tensor<double>()),
                                        net.constant(s.f_t1), net.constant(s.f_t));
    const Var x = net.act(net.dense(concat_lastdim(tape, e1, net.constant(s.f_t)), "fe.cat"));
    const auto e2 = tape.value(embed_point_to_patch(net, "fe", ct, neighbors(s.pc_t, s.pc_t, cfg.kp), x));
    EXPECT_EQ(run_fe(p, cfg, s), e2);
}

TEST(Dilated, TwoHopReceptiveFieldChain)
{
    // on a line: A=0, D=-0.5, B=1, C=2. With K_p = 3, A's patch is {A, D, B}; B's is {B, A, C}.
    const EmbedFlags flags;
    const auto p = fe_params(flags);
    auto cfg = config_with(flags);
    cfg.kp = 3;
    const PointCloud pc(std::vector<float>{0, 0, 0, 1, 0, 0, 2, 0, 0, -0.5f, 0, 0});
    const auto nt = neighbors(pc, pc, 3);
    const std::set<std::uint32_t> patch_a(nt.index.idx.begin(), nt.index.idx.begin() + 3);
    const std::set<std::uint32_t> patch_b(nt.index.idx.begin() + 3, nt.index.idx.begin() + 6);
    ASSERT_EQ(patch_a, (std::set<std::uint32_t>{0, 1, 3}));
    ASSERT_EQ(patch_b, (std::set<std::uint32_t>{0, 1, 2}));

    Rng rng(8);
    const auto x = random_tensor({4, kC}, rng);
    auto bumped = x;
    for (std::size_t c = 0; c < kC; ++c) bumped.data[2 * kC + c] += 0.5;  // perturb C

    EXPECT_FALSE(row_changed(run_stages(p, cfg, pc, x, false), run_stages(p, cfg, pc, bumped, false), 0));
    EXPECT_TRUE(row_changed(run_stages(p, cfg, pc, x, true), run_stages(p, cfg, pc, bumped, true), 0));
}

TEST(Dilated, ReceptiveFieldMonotone)
{
    const EmbedFlags flags;
    const auto p = fe_params(flags);
    const auto cfg = config_with(flags);
    std::size_t strictly_larger = 0;
    for (std::uint64_t inst = 0; inst < 5; ++inst) {
        const Scene s = random_scene(14, 100 + inst);
        const auto base2 = run_stages(p, cfg, s.pc_t, s.f_t, false);
        const auto base3 = run_stages(p, cfg, s.pc_t, s.f_t, true);
        std::vector<std::set<std::size_t>> r2(14), r3(14);
        for (std::size_t j = 0; j < 14; ++j) {
            auto x = s.f_t;
            for (std::size_t c = 0; c < kC; ++c) x.data[j * kC + c] += 0.3;
            const auto o2 = run_stages(p, cfg, s.pc_t, x, false);
            const auto o3 = run_stages(p, cfg, s.pc_t, x, true);
            for (std::size_t i = 0; i < 14; ++i) {
                if (row_changed(base2, o2, i)) r2[i].insert(j);
                if (row_changed(base3, o3, i)) r3[i].insert(j);
            }
        }
        for (std::size_t i = 0; i < 14; ++i) {
            EXPECT_TRUE(std::includes(r3[i].begin(), r3[i].end(), r2[i].begin(), r2[i].end()));
            strictly_larger += r3[i].size() > r2[i].size();
        }
    }
    EXPECT_GT(strictly_larger, 0u);
}

TEST(Dilated, GradientCheck)
{
    const EmbedFlags flags;
    const auto p = fe_params(flags);
    const auto cfg = config_with(flags);
    const Scene s = random_scene(32, 9);
    const NetLossFn loss = [&](Net<double>& net) {
        const Var c = net.constant(s.pc_t.as_tensor<double>());
        const NeighborTable nt = neighbors(s.pc_t, s.pc_t, cfg.kp);
        const Var e2 = embed_point_to_patch(net, "fe", c, nt, net.constant(s.f_t));
        return weighted_sum(net.tape, embed_dilated(net, "fe", c, nt, e2, true));
    };
    const auto r = param_grad_check(p, cfg, loss, "fe.s", 1000);
    EXPECT_LT(r.max_rel, 1e-4);
    EXPECT_GT(r.checked, 100u);
}

TEST(FlowEmbedding, StageOneOnlyIsFirstEmbedding)
{
    const EmbedFlags flags{false, false, false, false};
    const auto p = fe_params(flags);
    const auto cfg = config_with(flags);
    const Scene s = random_scene(20, 10);
    Tape<double> tape;
    Net<double> net{tape, p, cfg, false};
    const Var ct = net.constant(s.pc_t.as_tensor<double>());
    const auto e1 = tape.value(embed_patch_to_point(net, "fe", ct, s.pc_t1, net.constant(s.pc_t1.as_tensor<double>()),
                                                    net.constant(s.f_t1), net.constant(s.f_t)));
    EXPECT_EQ(run_fe(p, cfg, s), e1);
}

TEST(FlowEmbedding, EveryAblationVariantRunsAndIsDeterministic)
{
    const Scene s = random_scene(24, 11);
    for (const EmbedFlags f : {EmbedFlags{false, false, false, false}, EmbedFlags{true, false, false, false},
                               EmbedFlags{true, false, true, false}, EmbedFlags{true, false, true, true},
                               EmbedFlags{true, true, true, true}}) {
        const auto p = fe_params(f);
        const auto cfg = config_with(f);
        const auto a = run_fe(p, cfg, s);
        EXPECT_EQ(a.shape, (Shape{24, kC}));
        EXPECT_EQ(a, run_fe(p, cfg, s));
    }
}

TEST(FlowEmbedding, FullBlockGradientCheck)
{
    const EmbedFlags flags;
    const auto p = fe_params(flags);
    const auto cfg = config_with(flags);
    const Scene s = random_scene(32, 12);
    const NetLossFn loss = [&](Net<double>& net) {
        const Var ct = net.constant(s.pc_t.as_tensor<double>());
        return weighted_sum(net.tape, flow_embedding(net, "fe", s.pc_t, ct, net.constant(s.f_t), s.pc_t1,
                                                     net.constant(s.pc_t1.as_tensor<double>()),
                                                     net.constant(s.f_t1), ct));
    };
    const auto r = param_grad_check(p, cfg, loss, "fe", 8);
    EXPECT_LT(r.max_rel, 1e-4);
    EXPECT_GT(r.checked, 60u);
}
