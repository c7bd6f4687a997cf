#pragma once

// End-point error, strict/relaxed accuracy and outlier ratio over per-point flow vectors.
// Inputs are N x 3 row-major arrays; accumulation is in double.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rmsflow/errors.hpp"

namespace rmsflow {

struct MetricsReport {
    double epe3d_m = 0.0;
    double acc3ds = 0.0;
    double acc3dr = 0.0;
    double out3d = 0.0;
    std::size_t point_count = 0;
};

namespace detail {

inline void check_flow_pair(std::span<const float> pred, std::span<const float> gt)
{
    if (pred.size() != gt.size() || pred.size() % 3 != 0) {
        throw DimensionError("metrics: prediction has " + std::to_string(pred.size() / 3) +
                             " rows, ground truth " + std::to_string(gt.size() / 3));
    }
}

/// Per-point (error, |gt|).
inline std::pair<double, double> point_error(std::span<const float> pred, std::span<const float> gt, std::size_t i)
{
    double e2 = 0.0, g2 = 0.0;
    for (std::size_t a = 0; a < 3; ++a) {
        const double d = static_cast<double>(pred[3 * i + a]) - gt[3 * i + a];
        e2 += d * d;
        g2 += static_cast<double>(gt[3 * i + a]) * gt[3 * i + a];
    }
    return {std::sqrt(e2), std::sqrt(g2)};
}

}  // namespace detail

inline double epe3d(std::span<const float> pred, std::span<const float> gt)
{
    detail::check_flow_pair(pred, gt);
    const std::size_t n = pred.size() / 3;
    if (n == 0) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += detail::point_error(pred, gt, i).first;
    return sum / static_cast<double>(n);
}

/// Fraction of points with error < abs_thresh OR error/|gt| < rel_thresh.
/// The relative test is skipped for points whose ground truth is the zero vector.
inline double accuracy(std::span<const float> pred, std::span<const float> gt, double abs_thresh, double rel_thresh)
{
    detail::check_flow_pair(pred, gt);
    if (!(abs_thresh > 0.0) || !(rel_thresh > 0.0)) throw ContractError("accuracy: thresholds must be positive");
    const std::size_t n = pred.size() / 3;
    if (n == 0) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto [err, norm] = detail::point_error(pred, gt, i);
        const bool rel_ok = norm > 0.0 && err / norm < rel_thresh;
        if (err < abs_thresh || rel_ok) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

inline double acc3ds(std::span<const float> pred, std::span<const float> gt) { return accuracy(pred, gt, 0.05, 0.05); }
inline double acc3dr(std::span<const float> pred, std::span<const float> gt) { return accuracy(pred, gt, 0.1, 0.1); }

/// Fraction of points with error > abs_thresh OR error/|gt| > rel_thresh (strict inequalities).
inline double outliers(std::span<const float> pred, std::span<const float> gt, double abs_thresh = 0.3,
                       double rel_thresh = 0.1)
{
    detail::check_flow_pair(pred, gt);
    const std::size_t n = pred.size() / 3;
    if (n == 0) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto [err, norm] = detail::point_error(pred, gt, i);
        const bool rel_bad = norm > 0.0 && err / norm > rel_thresh;
        if (err > abs_thresh || rel_bad) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

inline MetricsReport evaluate_flow(std::span<const float> pred, std::span<const float> gt)
{
    return {epe3d(pred, gt), acc3ds(pred, gt), acc3dr(pred, gt), outliers(pred, gt), pred.size() / 3};
}

/// Point-count-weighted mean of per-scene reports.
inline MetricsReport merge_reports(std::span<const MetricsReport> reports)
{
    MetricsReport out;
    for (const auto& r : reports) {
        const auto w = static_cast<double>(r.point_count);
        out.epe3d_m += w * r.epe3d_m;
        out.acc3ds += w * r.acc3ds;
        out.acc3dr += w * r.acc3dr;
        out.out3d += w * r.out3d;
        out.point_count += r.point_count;
    }
    if (out.point_count > 0) {
        const auto n = static_cast<double>(out.point_count);
        out.epe3d_m /= n;
        out.acc3ds /= n;
        out.acc3dr /= n;
        out.out3d /= n;
    }
    return out;
}

}  // namespace rmsflow
