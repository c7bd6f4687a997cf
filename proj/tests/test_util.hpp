#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rmsflow/numcore.hpp"
#include "rmsflow/rng.hpp"

namespace rmsflow::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor<double> t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (double& v : t.data) v = u(rng);
    return t;
}

inline std::vector<float> random_floats(std::size_t n, Rng& rng, float lo = -1.0f, float hi = 1.0f)
{
    std::uniform_real_distribution<float> u(lo, hi);
    std::vector<float> v(n);
    for (float& x : v) x = u(rng);
    return v;
}

/// sum(y * r) with fixed random r, so every output element gets a distinct weight.
template <std::floating_point T>
Var weighted_sum(Tape<T>& tape, Var y, std::uint64_t seed = 99)
{
    Rng rng(seed);
    Tensor<T> r(tape.shape(y));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (T& v : r.data) v = static_cast<T>(u(rng));
    return sum_all(tape, mul(tape, y, tape.constant(std::move(r))));
}

struct GradCheck {
    double max_rel = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // kinks: one-sided differences disagree
};

/// Builds the scalar loss from tape variables holding `inputs`.
using LossFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

/// Central differences against the tape gradient for every input element.
/// Error measure: |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradCheck grad_check(const std::vector<Tensor<double>>& inputs, const LossFn& f, double eps = 1e-5,
                            double floor = 1e-3)
{
    auto eval = [&](const std::vector<Tensor<double>>& in) {
        Tape<double> tape;
        std::vector<Var> vars;
        for (const auto& t : in) vars.push_back(tape.variable(t));
        return tape.value(f(tape, vars)).data[0];
    };
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    const Var loss = f(tape, vars);
    tape.backward(loss);
    const double f0 = tape.value(loss).data[0];

    GradCheck r;
    std::vector<Tensor<double>> work = inputs;
    for (std::size_t a = 0; a < inputs.size(); ++a) {
        const auto g = tape.grad(vars[a]);
        for (std::size_t i = 0; i < inputs[a].size(); ++i) {
            const double x = inputs[a].data[i];
            work[a].data[i] = x + eps;
            const double fp = eval(work);
            work[a].data[i] = x - eps;
            const double fm = eval(work);
            work[a].data[i] = x;
            const double fwd = (fp - f0) / eps;
            const double bwd = (f0 - fm) / eps;
            if (std::abs(fwd - bwd) > 1e-2 * std::max({std::abs(fwd), std::abs(bwd), floor})) {
                ++r.skipped;
                continue;
            }
            const double num = (fp - fm) / (2 * eps);
            const double an = g.empty() ? 0.0 : g[i];
            const double rel = std::abs(an - num) / std::max({std::abs(an), std::abs(num), floor});
            r.max_rel = std::max(r.max_rel, rel);
            ++r.checked;
        }
    }
    return r;
}

}  // namespace rmsflow::testing
