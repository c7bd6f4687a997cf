#pragma once

#include <functional>
#include <string>

#include "rmsflow/predictor.hpp"
#include "test_util.hpp"

namespace rmsflow::testing {

/// Small network that keeps every code path (three coarse levels, all FE stages) but runs fast.
inline NetConfig tiny_config()
{
    NetConfig c;
    c.levels = {16, 8, 4};
    c.dense_levels = {24, 12, 6};
    c.c0 = 4;
    c.channels = {4, 6, 8};
    c.kp = 4;
    c.kq = 1;
    c.ko = 5;
    c.est_hidden1 = 6;
    c.est_hidden2 = 5;
    c.est_out_scale = 1.0;
    return c;
}

/// Weights in double with small random biases so bias paths are exercised too.
inline ParamStore<double> random_params(const ParamLayout& layout, std::uint64_t seed)
{
    ParamStore<double> p = layout.init(seed).cast<double>();
    Rng rng(seed + 1);
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    for (auto& [name, e] : p.entries()) {
        if (e.value.shape.size() == 1) {
            for (double& v : e.value.data) v = u(rng);
        }
    }
    return p;
}

inline PointCloud random_cloud(std::size_t n, Rng& rng, float extent = 1.0f)
{
    return PointCloud(random_floats(3 * n, rng, -extent, extent));
}

using NetLossFn = std::function<Var(Net<double>&)>;

/// Finite differences on the stored parameters whose names start with `prefix`; at most
/// `per_tensor` elements of each tensor are probed (evenly strided).
inline GradCheck param_grad_check(const ParamStore<double>& params, const NetConfig& cfg, const NetLossFn& f,
                                  const std::string& prefix, std::size_t per_tensor = 6, double eps = 1e-5,
                                  double floor = 1e-3)
{
    auto eval = [&](const ParamStore<double>& p) {
        Tape<double> tape;
        Net<double> net{tape, p, cfg, false};
        return tape.value(f(net)).data[0];
    };
    Tape<double> tape;
    Net<double> net{tape, params, cfg, true};
    const Var loss = f(net);
    tape.backward(loss);
    const double f0 = tape.value(loss).data[0];

    GradCheck r;
    ParamStore<double> work = params;
    for (const auto& [name, e] : params.entries()) {
        if (name.rfind(prefix, 0) != 0) continue;
        const auto it = tape.bound_params().find(name);
        const std::size_t n = e.value.size();
        const std::size_t stride = std::max<std::size_t>(1, n / per_tensor);
        for (std::size_t i = 0; i < n; i += stride) {
            double& x = work.value(name).data[i];
            const double x0 = x;
            x = x0 + eps;
            const double fp = eval(work);
            x = x0 - eps;
            const double fm = eval(work);
            x = x0;
            const double fwd = (fp - f0) / eps;
            const double bwd = (f0 - fm) / eps;
            if (std::abs(fwd - bwd) > 1e-2 * std::max({std::abs(fwd), std::abs(bwd), floor})) {
                ++r.skipped;
                continue;
            }
            const double num = (fp - fm) / (2 * eps);
            const double an = it == tape.bound_params().end() ? 0.0 : tape.grad(it->second)[i];
            r.max_rel = std::max(r.max_rel, std::abs(an - num) / std::max({std::abs(an), std::abs(num), floor}));
            ++r.checked;
        }
    }
    return r;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b)
{
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// max |a-b| / max(max|b|, 1e-12): the relative measure used for reassociation-only changes.
inline double rel_diff(std::span<const double> a, std::span<const double> b)
{
    double scale = 1e-12;
    for (double v : b) scale = std::max(scale, std::abs(v));
    return max_abs_diff(a, b) / scale;
}

}  // namespace rmsflow::testing
