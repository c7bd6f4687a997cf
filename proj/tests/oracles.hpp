#pragma once

// Independent reference implementations shared by the unit tests and the acceptance suite.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "rmsflow/geom.hpp"
#include "rmsflow/rng.hpp"

namespace rmsflow::testing {

/// Greedy max-min by direct recomputation of every distance to the selected set.
inline std::vector<std::uint32_t> naive_fps(const PointCloud& pc, std::size_t m)
{
    std::vector<std::uint32_t> sel{0};
    while (sel.size() < m) {
        double best = -1;
        std::uint32_t arg = 0;
        for (std::uint32_t i = 0; i < pc.size(); ++i) {
            if (std::find(sel.begin(), sel.end(), i) != sel.end()) continue;
            float d = std::numeric_limits<float>::infinity();
            for (auto s : sel) d = std::min(d, squared_distance(pc.data(i), pc.data(s)));
            if (d > best) {
                best = d;
                arg = i;
            }
        }
        sel.push_back(arg);
    }
    return sel;
}

/// Random cloud families: uniform, clustered, coincident, planar, quantized (many exact ties).
inline PointCloud family_cloud(std::size_t n, int family, Rng& rng)
{
    std::vector<float> v(3 * n);
    std::uniform_real_distribution<float> u(-5, 5);
    std::normal_distribution<float> g(0, 0.05f);
    switch (family) {
    case 0:
        for (float& x : v) x = u(rng);
        break;
    case 1: {
        std::array<std::array<float, 3>, 4> centers{};
        for (auto& c : centers) c = {u(rng), u(rng), u(rng)};
        for (std::size_t i = 0; i < n; ++i) {
            const auto& c = centers[i % 4];
            for (int a = 0; a < 3; ++a) v[3 * i + a] = c[a] + g(rng);
        }
        break;
    }
    case 2: {
        const float x = u(rng);
        std::fill(v.begin(), v.end(), x);
        break;
    }
    case 3:
        for (std::size_t i = 0; i < n; ++i) v[3 * i] = u(rng), v[3 * i + 1] = u(rng), v[3 * i + 2] = 1.0f;
        break;
    default:
        for (float& x : v) x = std::round(u(rng));
        break;
    }
    return PointCloud(std::move(v));
}

/// Per-point enumeration of the four metrics in double precision.
struct MetricOracle {
    double epe = 0, acc_s = 0, acc_r = 0, out = 0;
};

inline MetricOracle enumerate_metrics(const std::vector<float>& p, const std::vector<float>& g)
{
    MetricOracle o;
    const std::size_t n = p.size() / 3;
    for (std::size_t i = 0; i < n; ++i) {
        double e2 = 0, g2 = 0;
        for (int a = 0; a < 3; ++a) {
            const double d = double(p[3 * i + a]) - double(g[3 * i + a]);
            e2 += d * d;
            g2 += double(g[3 * i + a]) * g[3 * i + a];
        }
        const double e = std::sqrt(e2), gn = std::sqrt(g2);
        o.epe += e;
        o.acc_s += (e < 0.05 || (gn > 0 && e / gn < 0.05)) ? 1 : 0;
        o.acc_r += (e < 0.1 || (gn > 0 && e / gn < 0.1)) ? 1 : 0;
        o.out += (e > 0.3 || (gn > 0 && e / gn > 0.1)) ? 1 : 0;
    }
    o.epe /= n, o.acc_s /= n, o.acc_r /= n, o.out /= n;
    return o;
}

/// sum_k alpha_k * sum_i |f_i - g_i|, scalar loops in double.
inline double scalar_multiscale_loss(const std::vector<std::vector<float>>& flows,
                                     const std::vector<std::vector<float>>& gts, const std::vector<double>& alpha)
{
    double total = 0;
    for (std::size_t k = 0; k < flows.size(); ++k) {
        double s = 0;
        for (std::size_t i = 0; i < flows[k].size() / 3; ++i) {
            double e2 = 0;
            for (int a = 0; a < 3; ++a) e2 += std::pow(double(flows[k][3 * i + a]) - double(gts[k][3 * i + a]), 2);
            s += std::sqrt(e2);
        }
        total += alpha[k] * s;
    }
    return total;
}

}  // namespace rmsflow::testing
