#pragma once

// Point-cloud kernels: random sampling, farthest-point sampling, and exact k-nearest-neighbor
// search (brute force and a uniform-grid index). All neighbor tables order candidates by
// (squared distance, index), so every backend produces bit-identical results.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rmsflow/errors.hpp"
#include "rmsflow/numcore.hpp"
#include "rmsflow/rng.hpp"

namespace rmsflow {

/// P x 3 coordinates in meters, row-major.
struct PointCloud {
    std::vector<float> xyz;

    PointCloud() = default;
    explicit PointCloud(std::vector<float> coords) : xyz(std::move(coords))
    {
        if (xyz.size() % 3 != 0) throw DimensionError("point cloud needs 3 coordinates per point");
    }

    std::size_t size() const { return xyz.size() / 3; }
    bool empty() const { return xyz.empty(); }
    std::array<float, 3> point(std::size_t i) const { return {xyz[3 * i], xyz[3 * i + 1], xyz[3 * i + 2]}; }
    const float* data(std::size_t i) const { return xyz.data() + 3 * i; }

    /// Throws unless P >= 1 and every coordinate is finite.
    void validate() const
    {
        if (empty()) throw SizeError("point cloud is empty");
        for (float v : xyz) {
            if (!std::isfinite(v)) throw FormatError("point cloud has a non-finite coordinate");
        }
    }

    template <std::floating_point T>
    Tensor<T> as_tensor() const
    {
        return Tensor<T>({size(), 3}, std::vector<T>(xyz.begin(), xyz.end()));
    }

    bool operator==(const PointCloud&) const = default;
};

/// Unique row indices into a source cloud of `source_size` rows.
struct SampleIndex {
    std::vector<std::uint32_t> indices;
    std::size_t source_size = 0;

    std::size_t size() const { return indices.size(); }
    bool operator==(const SampleIndex&) const = default;
};

inline PointCloud select(const PointCloud& pc, std::span<const std::uint32_t> rows)
{
    std::vector<float> out;
    out.reserve(rows.size() * 3);
    for (std::uint32_t r : rows) {
        if (r >= pc.size()) throw BoundsError("select: row " + std::to_string(r) + " out of range");
        out.insert(out.end(), pc.data(r), pc.data(r) + 3);
    }
    return PointCloud(std::move(out));
}

inline PointCloud select(const PointCloud& pc, const SampleIndex& s) { return select(pc, s.indices); }

inline float squared_distance(const float* a, const float* b)
{
    const float dx = a[0] - b[0];
    const float dy = a[1] - b[1];
    const float dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

/// m distinct indices drawn uniformly without replacement (partial Fisher-Yates), O(P).
inline SampleIndex random_sample(const PointCloud& pc, std::size_t m, Rng& rng)
{
    const std::size_t p = pc.size();
    if (m > p) {
        throw SizeError("random_sample: requested " + std::to_string(m) + " of " + std::to_string(p) + " points");
    }
    std::vector<std::uint32_t> perm(p);
    std::iota(perm.begin(), perm.end(), 0u);
    for (std::size_t i = 0; i < m; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, p - 1);
        std::swap(perm[i], perm[pick(rng)]);
    }
    perm.resize(m);
    return {std::move(perm), p};
}

/// Greedy max-min selection starting at `start`; distance ties go to the lower index. O(P * m).
inline SampleIndex farthest_point_sample(const PointCloud& pc, std::size_t m, std::size_t start = 0)
{
    const std::size_t p = pc.size();
    if (m > p) {
        throw SizeError("farthest_point_sample: requested " + std::to_string(m) + " of " + std::to_string(p) +
                        " points");
    }
    if (m == 0) return {{}, p};
    if (start >= p) throw BoundsError("farthest_point_sample: start index out of range");
    std::vector<float> mind(p, std::numeric_limits<float>::infinity());
    std::vector<std::uint32_t> out;
    out.reserve(m);
    std::size_t cur = start;
    for (std::size_t s = 0; s < m; ++s) {
        out.push_back(static_cast<std::uint32_t>(cur));
        mind[cur] = -1.0f;  // selected points never win again, even among coincident points
        const float* c = pc.data(cur);
        std::size_t best = 0;
        float best_d = -1.0f;
        for (std::size_t i = 0; i < p; ++i) {
            const float d = std::min(mind[i], squared_distance(pc.data(i), c));
            mind[i] = d;
            if (d > best_d) {
                best_d = d;
                best = i;
            }
        }
        cur = best;
    }
    return {std::move(out), p};
}

/// For each query row: k target indices sorted by (squared distance, index), and those distances.
struct NeighborTable {
    IndexTable index;
    std::vector<float> dist2;

    std::size_t rows() const { return index.rows; }
    std::size_t k() const { return index.cols; }
    bool operator==(const NeighborTable&) const = default;
};

namespace detail {

/// Keeps the k smallest (distance, index) pairs seen so far, sorted ascending.
class TopK {
public:
    explicit TopK(std::size_t k) : k_(k) { items_.reserve(k + 1); }

    void offer(float d, std::uint32_t i)
    {
        if (items_.size() == k_ && !less(d, i, items_.back().first, items_.back().second)) return;
        auto it = std::upper_bound(items_.begin(), items_.end(), std::pair{d, i},
                                   [](const auto& a, const auto& b) { return less(a.first, a.second, b.first, b.second); });
        items_.insert(it, {d, i});
        if (items_.size() > k_) items_.pop_back();
    }

    bool full() const { return items_.size() == k_; }
    float worst() const { return items_.back().first; }
    void clear() { items_.clear(); }
    const std::vector<std::pair<float, std::uint32_t>>& items() const { return items_; }

private:
    static bool less(float da, std::uint32_t ia, float db, std::uint32_t ib)
    {
        return da < db || (da == db && ia < ib);
    }

    std::size_t k_;
    std::vector<std::pair<float, std::uint32_t>> items_;
};

inline void check_knn_args(const PointCloud& targets, std::size_t k)
{
    if (targets.empty()) throw SizeError("knn: target cloud is empty");
    for (float v : targets.xyz) {
        if (!std::isfinite(v)) throw ContractError("knn: non-finite target coordinate");
    }
    if (k > targets.size()) {
        throw SizeError("knn: k=" + std::to_string(k) + " exceeds target size " + std::to_string(targets.size()));
    }
}

}  // namespace detail

/// Exhaustive exact KNN.
inline NeighborTable knn_brute(const PointCloud& queries, const PointCloud& targets, std::size_t k)
{
    detail::check_knn_args(targets, k);
    NeighborTable out{IndexTable(queries.size(), k), std::vector<float>(queries.size() * k)};
    detail::TopK top(k);
    for (std::size_t q = 0; q < queries.size(); ++q) {
        top.clear();
        const float* qp = queries.data(q);
        for (std::size_t t = 0; t < targets.size(); ++t) {
            top.offer(squared_distance(qp, targets.data(t)), static_cast<std::uint32_t>(t));
        }
        for (std::size_t j = 0; j < k; ++j) {
            out.dist2[q * k + j] = top.items()[j].first;
            out.index.at(q, j) = top.items()[j].second;
        }
    }
    return out;
}

/// Uniform-grid spatial index over a fixed target cloud. Queries search cells in expanding
/// Chebyshev shells and stop once the k-th best distance is strictly inside the searched region,
/// so results are exact and equal to knn_brute.
class GridIndex {
public:
    explicit GridIndex(const PointCloud& targets, double points_per_cell = 2.0) : targets_(&targets)
    {
        if (targets.empty()) throw SizeError("knn: target cloud is empty");
    for (float v : targets.xyz) {
        if (!std::isfinite(v)) throw ContractError("knn: non-finite target coordinate");
    }
        std::array<double, 3> lo{}, hi{};
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::numeric_limits<double>::infinity();
            hi[a] = -std::numeric_limits<double>::infinity();
        }
        for (std::size_t i = 0; i < targets.size(); ++i) {
            for (int a = 0; a < 3; ++a) {
                lo[a] = std::min(lo[a], static_cast<double>(targets.xyz[3 * i + a]));
                hi[a] = std::max(hi[a], static_cast<double>(targets.xyz[3 * i + a]));
            }
        }
        const double diag = std::sqrt((hi[0] - lo[0]) * (hi[0] - lo[0]) + (hi[1] - lo[1]) * (hi[1] - lo[1]) +
                                      (hi[2] - lo[2]) * (hi[2] - lo[2]));
        const double n = static_cast<double>(targets.size());
        const double target_cells = std::max(1.0, n / points_per_cell);
        if (diag > 0.0) {
            // flat extents are padded so a planar or linear cloud still gets a sensible cell size
            const double floor_extent = diag * 1e-3;
            double vol = 1.0;
            for (int a = 0; a < 3; ++a) vol *= std::max(hi[a] - lo[a], floor_extent);
            cell_ = std::cbrt(vol / target_cells);
            for (int a = 0; a < 3; ++a) {
                const double cells = std::floor((hi[a] - lo[a]) / cell_) + 1.0;
                dims_[a] = static_cast<int>(std::clamp(cells, 1.0, 1024.0));
            }
        } else {
            cell_ = 1.0;
            dims_ = {1, 1, 1};
        }
        origin_ = lo;
        const std::size_t ncell = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
        std::vector<std::uint32_t> counts(ncell + 1, 0);
        std::vector<std::uint32_t> cell_of(targets.size());
        for (std::size_t i = 0; i < targets.size(); ++i) {
            cell_of[i] = static_cast<std::uint32_t>(flat(cell_coords(targets.data(i))));
            ++counts[cell_of[i] + 1];
        }
        std::partial_sum(counts.begin(), counts.end(), counts.begin());
        start_ = counts;
        items_.resize(targets.size());
        std::vector<std::uint32_t> fill(counts.begin(), counts.end() - 1);
        for (std::size_t i = 0; i < targets.size(); ++i) items_[fill[cell_of[i]]++] = static_cast<std::uint32_t>(i);
    }

    NeighborTable query(const PointCloud& queries, std::size_t k) const
    {
        detail::check_knn_args(*targets_, k);
        NeighborTable out{IndexTable(queries.size(), k), std::vector<float>(queries.size() * k)};
        detail::TopK top(k);
        for (std::size_t q = 0; q < queries.size(); ++q) {
            search(queries.data(q), top);
            for (std::size_t j = 0; j < k; ++j) {
                out.dist2[q * k + j] = top.items()[j].first;
                out.index.at(q, j) = top.items()[j].second;
            }
        }
        return out;
    }

    std::array<int, 3> dims() const { return dims_; }
    double cell_size() const { return cell_; }

private:
    std::array<int, 3> cell_coords(const float* p) const
    {
        std::array<int, 3> c{};
        for (int a = 0; a < 3; ++a) {
            const double f = std::floor((static_cast<double>(p[a]) - origin_[a]) / cell_);
            c[a] = static_cast<int>(std::clamp(f, 0.0, static_cast<double>(dims_[a] - 1)));
        }
        return c;
    }

    std::size_t flat(const std::array<int, 3>& c) const
    {
        return (static_cast<std::size_t>(c[2]) * dims_[1] + c[1]) * dims_[0] + c[0];
    }

    void scan_cell(const std::array<int, 3>& c, const float* qp, detail::TopK& top) const
    {
        const std::size_t f = flat(c);
        for (std::uint32_t s = start_[f]; s < start_[f + 1]; ++s) {
            const std::uint32_t t = items_[s];
            top.offer(squared_distance(qp, targets_->data(t)), t);
        }
    }

    void search(const float* qp, detail::TopK& top) const
    {
        top.clear();
        const std::array<int, 3> c = cell_coords(qp);
        const int max_r = std::max({c[0], dims_[0] - 1 - c[0], c[1], dims_[1] - 1 - c[1], c[2], dims_[2] - 1 - c[2]});
        for (int r = 0; r <= max_r; ++r) {
            visit_shell(c, r, qp, top);
            if (!top.full()) continue;
            // Lower bound on the distance from the query to any cell outside the searched cube.
            double bound = std::numeric_limits<double>::infinity();
            for (int a = 0; a < 3; ++a) {
                if (c[a] - r > 0) {
                    const double lo = origin_[a] + (c[a] - r) * cell_;
                    bound = std::min(bound, std::max(0.0, static_cast<double>(qp[a]) - lo));
                }
                if (c[a] + r < dims_[a] - 1) {
                    const double hi = origin_[a] + (c[a] + r + 1) * cell_;
                    bound = std::min(bound, std::max(0.0, hi - static_cast<double>(qp[a])));
                }
            }
            if (std::isinf(bound)) break;  // whole grid searched
            // shrink slightly so float rounding in cell assignment can never cut off a candidate
            const double safe = bound * (1.0 - 1e-5) - 1e-7 * cell_;
            if (safe > 0.0 && static_cast<double>(top.worst()) < safe * safe) break;
        }
    }

    void visit_shell(const std::array<int, 3>& c, int r, const float* qp, detail::TopK& top) const
    {
        const int x0 = std::max(c[0] - r, 0), x1 = std::min(c[0] + r, dims_[0] - 1);
        const int y0 = std::max(c[1] - r, 0), y1 = std::min(c[1] + r, dims_[1] - 1);
        const int z0 = std::max(c[2] - r, 0), z1 = std::min(c[2] + r, dims_[2] - 1);
        for (int z = z0; z <= z1; ++z) {
            const bool zedge = std::abs(z - c[2]) == r;
            for (int y = y0; y <= y1; ++y) {
                const bool yedge = zedge || std::abs(y - c[1]) == r;
                if (yedge) {
                    for (int x = x0; x <= x1; ++x) scan_cell({x, y, z}, qp, top);
                } else {
                    if (c[0] - r >= 0) scan_cell({c[0] - r, y, z}, qp, top);
                    if (r > 0 && c[0] + r < dims_[0]) scan_cell({c[0] + r, y, z}, qp, top);
                }
            }
        }
    }

    const PointCloud* targets_;
    std::array<double, 3> origin_{};
    std::array<int, 3> dims_{1, 1, 1};
    double cell_ = 1.0;
    std::vector<std::uint32_t> start_;
    std::vector<std::uint32_t> items_;
};

/// Exact KNN backed by GridIndex; identical output to knn_brute.
inline NeighborTable knn_accel(const PointCloud& queries, const PointCloud& targets, std::size_t k)
{
    detail::check_knn_args(targets, k);
    for (float v : queries.xyz) {
        if (!std::isfinite(v)) throw ContractError("knn_accel: non-finite query coordinate");
    }
    return GridIndex(targets).query(queries, k);
}

}  // namespace rmsflow
