#pragma once

// Dense tensors, a reverse-mode tape, the differentiable operations the network
// is built from, and an Adam optimizer over a name-addressed parameter store.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "rmsflow/errors.hpp"

namespace rmsflow {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// 64-byte aligned storage. Eigen picks its vector peeling from the buffer address, so
/// unaligned buffers make reductions depend on where the allocator put them.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <std::floating_point T>
struct Tensor {
    Shape shape;
    Buffer<T> data;

    Tensor() : shape{0} {}

    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}

    Tensor(Shape s, Buffer<T> values) : shape(std::move(s)), data(std::move(values)) { check_size(); }

    Tensor(Shape s, std::initializer_list<T> values) : shape(std::move(s)), data(values) { check_size(); }

    Tensor(Shape s, const std::vector<T>& values) : shape(std::move(s)), data(values.begin(), values.end())
    {
        check_size();
    }

    void check_size() const
    {
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                                 std::to_string(shape_numel(shape)) + " values, got " +
                                 std::to_string(data.size()));
        }
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t last_dim() const { return shape.empty() ? 1 : shape.back(); }
    std::size_t rows() const { return last_dim() == 0 ? 0 : size() / last_dim(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    template <std::floating_point U>
    Tensor<U> cast() const
    {
        return Tensor<U>(shape, std::vector<U>(data.begin(), data.end()));
    }

    bool operator==(const Tensor&) const = default;
};

/// Row-major table of row indices, e.g. K neighbors for each of M queries.
struct IndexTable {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint32_t> idx;

    IndexTable() = default;
    IndexTable(std::size_t r, std::size_t c) : rows(r), cols(c), idx(r * c, 0) {}
    IndexTable(std::size_t r, std::size_t c, std::vector<std::uint32_t> values)
        : rows(r), cols(c), idx(std::move(values))
    {
        if (idx.size() != rows * cols) {
            throw DimensionError("index table " + std::to_string(rows) + "x" + std::to_string(cols) +
                                 " given " + std::to_string(idx.size()) + " entries");
        }
    }

    std::uint32_t& at(std::size_t r, std::size_t c) { return idx[r * cols + c]; }
    std::uint32_t at(std::size_t r, std::size_t c) const { return idx[r * cols + c]; }

    /// Table whose row i is K copies of i.
    static IndexTable self(std::size_t n, std::size_t k)
    {
        IndexTable t(n, k);
        for (std::size_t i = 0; i < n; ++i) {
            std::fill_n(t.idx.begin() + static_cast<std::ptrdiff_t>(i * k), k, static_cast<std::uint32_t>(i));
        }
        return t;
    }

    bool operator==(const IndexTable&) const = default;
};

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <std::floating_point T>
class ParamStore {
public:
    struct Entry {
        Tensor<T> value;
        Buffer<T> grad;  // empty until populated
        Buffer<T> m;
        Buffer<T> v;
    };

    void add(const std::string& name, Tensor<T> value)
    {
        auto [it, inserted] = entries_.try_emplace(name);
        if (!inserted) {
            throw ContractError("duplicate parameter '" + name + "'");
        }
        it->second.m.assign(value.size(), T(0));
        it->second.v.assign(value.size(), T(0));
        it->second.value = std::move(value);
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    std::size_t size() const { return entries_.size(); }

    const Entry& entry(const std::string& name) const
    {
        auto it = entries_.find(name);
        if (it == entries_.end()) {
            throw ContractError("unknown parameter '" + name + "'");
        }
        return it->second;
    }

    Entry& entry(const std::string& name)
    {
        return const_cast<Entry&>(std::as_const(*this).entry(name));
    }

    const Tensor<T>& value(const std::string& name) const { return entry(name).value; }
    Tensor<T>& value(const std::string& name) { return entry(name).value; }

    /// Sorted by name.
    const std::map<std::string, Entry>& entries() const { return entries_; }
    std::map<std::string, Entry>& entries() { return entries_; }

    std::size_t scalar_count() const
    {
        std::size_t n = 0;
        for (const auto& [_, e] : entries_) n += e.value.size();
        return n;
    }

    void zero_grad()
    {
        for (auto& [_, e] : entries_) e.grad.assign(e.value.size(), T(0));
    }

    void clear_grad()
    {
        for (auto& [_, e] : entries_) e.grad.clear();
    }

    std::uint64_t step() const { return step_; }
    void set_step(std::uint64_t s) { step_ = s; }

    template <std::floating_point U>
    ParamStore<U> cast() const
    {
        ParamStore<U> out;
        for (const auto& [name, e] : entries_) {
            out.add(name, e.value.template cast<U>());
            auto& o = out.entry(name);
            o.m.assign(e.m.begin(), e.m.end());
            o.v.assign(e.v.begin(), e.v.end());
        }
        out.set_step(step_);
        return out;
    }

private:
    std::map<std::string, Entry> entries_;
    std::uint64_t step_ = 0;
};

/// One Adam update using the gradients currently held in the store.
template <std::floating_point T>
void adam_step(ParamStore<T>& params, double lr, const AdamConfig& cfg = {})
{
    for (const auto& [name, e] : params.entries()) {
        if (e.grad.size() != e.value.size()) {
            throw ContractError("adam_step: no gradient for parameter '" + name + "'");
        }
    }
    params.set_step(params.step() + 1);
    const double t = static_cast<double>(params.step());
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& [_, e] : params.entries()) {
        for (std::size_t i = 0; i < e.value.size(); ++i) {
            const double g = e.grad[i];
            const double m = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g;
            const double v = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g * g;
            e.m[i] = static_cast<T>(m);
            e.v[i] = static_cast<T>(v);
            const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
            e.value[i] = static_cast<T>(e.value[i] - update);
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
template <std::floating_point T>
double clip_grad_norm(ParamStore<T>& params, double max_norm)
{
    double sq = 0.0;
    for (const auto& [_, e] : params.entries()) {
        for (T g : e.grad) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& [_, e] : params.entries()) {
            for (T& g : e.grad) g = static_cast<T>(g * s);
        }
    }
    return norm;
}

/// Kaiming-uniform weights (fan-in = shape[0]) for a [in, out] matrix.
template <std::floating_point T, class Rng>
Tensor<T> kaiming_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng)
{
    Tensor<T> w({fan_in, fan_out});
    const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& x : w.data) x = static_cast<T>(dist(rng));
    return w;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a node on a tape.
struct Var {
    std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
    bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

template <std::floating_point T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

    Var constant(Tensor<T> value) { return push(std::move(value), {}, nullptr, false); }
    Var variable(Tensor<T> value) { return push(std::move(value), {}, nullptr, true); }

    /// Binds a stored parameter as a gradient-carrying leaf. Repeated calls return the same node.
    Var param(const ParamStore<T>& store, const std::string& name)
    {
        if (auto it = params_.find(name); it != params_.end()) {
            return it->second;
        }
        Var v = variable(store.value(name));
        params_.emplace(name, v);
        return v;
    }

    const Tensor<T>& value(Var v) const { return node(v).value; }
    const Shape& shape(Var v) const { return node(v).value.shape; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<std::uint32_t>& inputs(Var v) const { return node(v).inputs; }

    /// dLoss/dv after backward(); empty if v does not carry gradients.
    std::span<const T> grad(Var v) const { return node(v).grad; }

    /// Mutable gradient buffer for use inside backward functions; empty span if not tracked.
    std::span<T> grad_buffer(std::uint32_t id) { return nodes_[id].grad; }
    std::span<const T> grad_of(std::uint32_t id) const { return nodes_[id].grad; }
    const Tensor<T>& value_of(std::uint32_t id) const { return nodes_[id].value; }

    /// Records a node. The node tracks gradients if any input does.
    Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn)
    {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
    }

    Var record(Tensor<T> value, std::span<const Var> inputs, BackwardFn fn)
    {
        bool rg = false;
        for (Var in : inputs) rg = rg || node(in).requires_grad;
        std::vector<std::uint32_t> ids;
        ids.reserve(inputs.size());
        for (Var in : inputs) ids.push_back(in.id);
        return push(std::move(value), std::move(ids), rg ? std::move(fn) : nullptr, rg);
    }

    /// Fills gradients of every tracked node reachable from loss. Safe to call repeatedly.
    void backward(Var loss)
    {
        const Node& l = node(loss);
        if (l.value.size() != 1) {
            throw ContractError("backward: loss must be a scalar, got shape " + shape_str(l.value.shape));
        }
        for (auto& n : nodes_) {
            if (n.requires_grad) {
                n.grad.assign(n.value.size(), T(0));
            } else {
                n.grad.clear();
            }
        }
        if (!l.requires_grad) return;
        nodes_[loss.id].grad[0] = T(1);
        for (std::uint32_t id = loss.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (n.requires_grad && n.backward) n.backward(*this, id);
        }
    }

    /// Adds gradients of bound parameters into the store's gradient buffers.
    void accumulate_into(ParamStore<T>& store) const
    {
        for (const auto& [name, v] : params_) {
            auto& e = store.entry(name);
            const auto& g = node(v).grad;
            if (e.grad.size() != e.value.size()) e.grad.assign(e.value.size(), T(0));
            for (std::size_t i = 0; i < g.size(); ++i) e.grad[i] += g[i];
        }
    }

    const std::unordered_map<std::string, Var>& bound_params() const { return params_; }

private:
    struct Node {
        Tensor<T> value;
        std::vector<std::uint32_t> inputs;
        BackwardFn backward;
        bool requires_grad = false;
        Buffer<T> grad;
    };

    const Node& node(Var v) const
    {
        if (!v.valid() || v.id >= nodes_.size()) {
            throw ContractError("variable does not belong to this tape");
        }
        return nodes_[v.id];
    }

    Var push(Tensor<T> value, std::vector<std::uint32_t> inputs, BackwardFn fn, bool rg)
    {
#ifndef NDEBUG
        for (T x : value.data) {
            if (!std::isfinite(x)) throw ContractError("non-finite value produced on tape");
        }
#endif
        nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(fn), rg, {}});
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    std::vector<Node> nodes_;
    std::unordered_map<std::string, Var> params_;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op)
{
    if (a != b) {
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " differ");
    }
}

}  // namespace detail

/// y = x·w + b over the last dimension of x. Pass an invalid Var to omit the bias.
template <std::floating_point T>
Var linear(Tape<T>& tape, Var x, Var w, Var b = {})
{
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& wv = tape.value(w);
    if (wv.rank() != 2 || xv.last_dim() != wv.shape[0]) {
        throw DimensionError("linear: input x" + shape_str(xv.shape) + " does not match weight w" +
                             shape_str(wv.shape));
    }
    const std::size_t cin = wv.shape[0];
    const std::size_t cout = wv.shape[1];
    const std::size_t rows = cin == 0 ? shape_numel(Shape(xv.shape.begin(), xv.shape.end() - 1)) : xv.rows();
    if (b.valid()) {
        const Tensor<T>& bv = tape.value(b);
        if (bv.size() != cout) {
            throw DimensionError("linear: bias b" + shape_str(bv.shape) + " does not match weight w" +
                                 shape_str(wv.shape));
        }
    }
    Shape out_shape = xv.shape;
    out_shape.back() = cout;
    Tensor<T> y(out_shape);
    {
        detail::MapMat<T> Y(y.data.data(), rows, cout);
        if (cin > 0) {
            detail::CMapMat<T> X(xv.data.data(), rows, cin);
            detail::CMapMat<T> W(wv.data.data(), cin, cout);
            Y.noalias() = X * W;
        }
        if (b.valid()) {
            Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> B(tape.value(b).data.data(), cout);
            Y.rowwise() += B;
        }
    }
    auto back = [x, w, b, rows, cin, cout](Tape<T>& t, std::uint32_t self) {
        detail::CMapMat<T> G(t.grad_of(self).data(), rows, cout);
        if (auto gx = t.grad_buffer(x.id); !gx.empty() && cin > 0) {
            detail::CMapMat<T> W(t.value_of(w.id).data.data(), cin, cout);
            detail::MapMat<T>(gx.data(), rows, cin).noalias() += G * W.transpose();
        }
        if (auto gw = t.grad_buffer(w.id); !gw.empty() && cin > 0) {
            detail::CMapMat<T> X(t.value_of(x.id).data.data(), rows, cin);
            detail::MapMat<T>(gw.data(), cin, cout).noalias() += X.transpose() * G;
        }
        if (b.valid()) {
            if (auto gb = t.grad_buffer(b.id); !gb.empty()) {
                Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), cout) += G.colwise().sum();
            }
        }
    };
    if (b.valid()) return tape.record(std::move(y), {x, w, b}, back);
    return tape.record(std::move(y), {x, w}, back);
}

template <std::floating_point T>
Var leaky_relu(Tape<T>& tape, Var x, T slope)
{
    if (!(slope >= T(0) && slope < T(1))) {
        throw ContractError("leaky_relu: slope must lie in [0,1)");
    }
    Tensor<T> y = tape.value(x);
    for (T& v : y.data) v = v > T(0) ? v : slope * v;
    return tape.record(std::move(y), {x}, [x, slope](Tape<T>& t, std::uint32_t self) {
        auto gx = t.grad_buffer(x.id);
        auto g = t.grad_of(self);
        const auto& xv = t.value_of(x.id).data;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += xv[i] > T(0) ? g[i] : slope * g[i];
    });
}

namespace detail {

/// Softmax over an axis with extent k and element stride `stride`, for all (outer, inner) slices.
template <class T>
void softmax_axis(std::span<const T> x, std::span<T> y, std::size_t outer, std::size_t k, std::size_t inner)
{
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t c = 0; c < inner; ++c) {
            const std::size_t base = o * k * inner + c;
            T mx = x[base];
            for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[base + j * inner]);
            T sum = 0;
            for (std::size_t j = 0; j < k; ++j) {
                const T e = std::exp(x[base + j * inner] - mx);
                y[base + j * inner] = e;
                sum += e;
            }
            for (std::size_t j = 0; j < k; ++j) y[base + j * inner] /= sum;
        }
    }
}

template <class T>
void softmax_axis_backward(std::span<const T> y, std::span<const T> g, std::span<T> gx, std::size_t outer,
                           std::size_t k, std::size_t inner)
{
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t c = 0; c < inner; ++c) {
            const std::size_t base = o * k * inner + c;
            T dot = 0;
            for (std::size_t j = 0; j < k; ++j) dot += y[base + j * inner] * g[base + j * inner];
            for (std::size_t j = 0; j < k; ++j) {
                const std::size_t i = base + j * inner;
                gx[i] += y[i] * (g[i] - dot);
            }
        }
    }
}

}  // namespace detail

/// Max-subtracted softmax over the last dimension.
template <std::floating_point T>
Var softmax_lastdim(Tape<T>& tape, Var x)
{
    const Tensor<T>& xv = tape.value(x);
    const std::size_t k = xv.last_dim();
    if (k == 0) throw DimensionError("softmax_lastdim: empty last dimension");
    Tensor<T> y(xv.shape);
    const std::size_t outer = xv.rows();
    detail::softmax_axis<T>(xv.data, y.data, outer, k, 1);
    return tape.record(std::move(y), {x}, [x, outer, k](Tape<T>& t, std::uint32_t self) {
        detail::softmax_axis_backward<T>(t.value_of(self).data, t.grad_of(self), t.grad_buffer(x.id), outer, k, 1);
    });
}

/// Softmax over the neighbor axis of x[..., K, C], independently per channel.
template <std::floating_point T>
Var softmax_neighbors(Tape<T>& tape, Var x)
{
    const Tensor<T>& xv = tape.value(x);
    if (xv.rank() < 2) throw DimensionError("softmax_neighbors: need [..., K, C], got " + shape_str(xv.shape));
    const std::size_t c = xv.shape.back();
    const std::size_t k = xv.shape[xv.rank() - 2];
    if (k == 0) throw EmptyNeighborhoodError("softmax_neighbors: K == 0");
    const std::size_t outer = c == 0 ? 0 : xv.size() / (k * c);
    Tensor<T> y(xv.shape);
    detail::softmax_axis<T>(xv.data, y.data, outer, k, c);
    return tape.record(std::move(y), {x}, [x, outer, k, c](Tape<T>& t, std::uint32_t self) {
        detail::softmax_axis_backward<T>(t.value_of(self).data, t.grad_of(self), t.grad_buffer(x.id), outer, k, c);
    });
}

template <std::floating_point T>
struct MaxReduceResult {
    Var values;
    std::vector<std::uint32_t> argmax;  // [..., C], position along K
};

/// Per-channel maximum over the neighbor axis of x[..., K, C]. Ties go to the lowest index.
template <std::floating_point T>
MaxReduceResult<T> max_reduce(Tape<T>& tape, Var x)
{
    const Tensor<T>& xv = tape.value(x);
    if (xv.rank() < 2) throw DimensionError("max_reduce: need [..., K, C], got " + shape_str(xv.shape));
    const std::size_t c = xv.shape.back();
    const std::size_t k = xv.shape[xv.rank() - 2];
    if (k == 0) throw EmptyNeighborhoodError("max_reduce: empty neighborhood (K == 0)");
    const std::size_t outer = c == 0 ? 0 : xv.size() / (k * c);
    Shape out_shape(xv.shape.begin(), xv.shape.end() - 2);
    out_shape.push_back(c);
    Tensor<T> y(out_shape);
    std::vector<std::uint32_t> arg(outer * c, 0);
    for (std::size_t o = 0; o < outer; ++o) {
        const T* src = xv.data.data() + o * k * c;
        T* dst = y.data.data() + o * c;
        std::uint32_t* a = arg.data() + o * c;
        std::copy_n(src, c, dst);
        for (std::size_t j = 1; j < k; ++j) {
            const T* row = src + j * c;
            for (std::size_t ch = 0; ch < c; ++ch) {
                if (row[ch] > dst[ch]) {
                    dst[ch] = row[ch];
                    a[ch] = static_cast<std::uint32_t>(j);
                }
            }
        }
    }
    auto shared_arg = std::make_shared<const std::vector<std::uint32_t>>(arg);
    Var v = tape.record(std::move(y), {x}, [x, outer, k, c, shared_arg](Tape<T>& t, std::uint32_t self) {
        auto gx = t.grad_buffer(x.id);
        auto g = t.grad_of(self);
        const auto& a = *shared_arg;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                gx[(o * k + a[o * c + ch]) * c + ch] += g[o * c + ch];
            }
        }
    });
    return {v, std::move(arg)};
}

/// Sum over the neighbor axis of x[..., K, C].
template <std::floating_point T>
Var sum_neighbors(Tape<T>& tape, Var x)
{
    const Tensor<T>& xv = tape.value(x);
    if (xv.rank() < 2) throw DimensionError("sum_neighbors: need [..., K, C], got " + shape_str(xv.shape));
    const std::size_t c = xv.shape.back();
    const std::size_t k = xv.shape[xv.rank() - 2];
    const std::size_t outer = (c == 0 || k == 0) ? 0 : xv.size() / (k * c);
    Shape out_shape(xv.shape.begin(), xv.shape.end() - 2);
    out_shape.push_back(c);
    Tensor<T> y(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t ch = 0; ch < c; ++ch) y.data[o * c + ch] += xv.data[(o * k + j) * c + ch];
        }
    }
    return tape.record(std::move(y), {x}, [x, outer, k, c](Tape<T>& t, std::uint32_t self) {
        auto gx = t.grad_buffer(x.id);
        auto g = t.grad_of(self);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < k; ++j) {
                for (std::size_t ch = 0; ch < c; ++ch) gx[(o * k + j) * c + ch] += g[o * c + ch];
            }
        }
    });
}

/// out[m, k, :] = x[idx[m, k], :]
template <std::floating_point T>
Var gather_rows(Tape<T>& tape, Var x, const IndexTable& idx)
{
    const Tensor<T>& xv = tape.value(x);
    if (xv.rank() != 2) throw DimensionError("gather_rows: source must be [N, C], got " + shape_str(xv.shape));
    const std::size_t n = xv.shape[0];
    const std::size_t c = xv.shape[1];
    for (std::uint32_t i : idx.idx) {
        if (i >= n) {
            throw BoundsError("gather_rows: index " + std::to_string(i) + " out of range for " +
                              std::to_string(n) + " rows");
        }
    }
    Tensor<T> y({idx.rows, idx.cols, c});
    for (std::size_t r = 0; r < idx.idx.size(); ++r) {
        std::copy_n(xv.data.data() + idx.idx[r] * c, c, y.data.data() + r * c);
    }
    auto shared_idx = std::make_shared<const std::vector<std::uint32_t>>(idx.idx);
    return tape.record(std::move(y), {x}, [x, c, shared_idx](Tape<T>& t, std::uint32_t self) {
        auto gx = t.grad_buffer(x.id);
        auto g = t.grad_of(self);
        const auto& ids = *shared_idx;
        for (std::size_t r = 0; r < ids.size(); ++r) {
            T* dst = gx.data() + ids[r] * c;
            const T* src = g.data() + r * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
    });
}

/// Concatenation of several tensors along the last dimension; leading shapes must agree.
template <std::floating_point T>
Var concat_lastdim(Tape<T>& tape, std::span<const Var> parts)
{
    if (parts.empty()) throw ContractError("concat_lastdim: nothing to concatenate");
    const Shape& s0 = tape.shape(parts[0]);
    const Shape lead(s0.begin(), s0.end() - 1);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (Var p : parts) {
        const Shape& s = tape.shape(p);
        if (s.size() != s0.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
            throw DimensionError("concat_lastdim: leading shapes " + shape_str(s0) + " and " + shape_str(s) +
                                 " differ");
        }
        widths.push_back(s.back());
        total += s.back();
    }
    const std::size_t rows = shape_numel(lead);
    Shape out_shape = lead;
    out_shape.push_back(total);
    Tensor<T> y(out_shape);
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& src = tape.value(parts[p]).data;
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(src.data() + r * widths[p], widths[p], y.data.data() + r * total + off);
        }
        off += widths[p];
    }
    std::vector<std::uint32_t> ids;
    for (Var p : parts) ids.push_back(p.id);
    auto back = [ids, widths, rows, total](Tape<T>& t, std::uint32_t self) {
        auto g = t.grad_of(self);
        std::size_t o = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
            if (auto gx = t.grad_buffer(ids[p]); !gx.empty()) {
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t ch = 0; ch < widths[p]; ++ch) gx[r * widths[p] + ch] += g[r * total + o + ch];
                }
            }
            o += widths[p];
        }
    };
    return tape.record(std::move(y), parts, back);
}

template <std::floating_point T>
Var concat_lastdim(Tape<T>& tape, Var a, Var b)
{
    const Var parts[] = {a, b};
    return concat_lastdim(tape, std::span<const Var>(parts));
}

template <std::floating_point T>
Var reshape(Tape<T>& tape, Var x, Shape shape)
{
    Tensor<T> y = tape.value(x);
    if (shape_numel(shape) != y.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(y.shape) + " as " + shape_str(shape));
    }
    y.shape = std::move(shape);
    return tape.record(std::move(y), {x}, [x](Tape<T>& t, std::uint32_t self) {
        auto gx = t.grad_buffer(x.id);
        auto g = t.grad_of(self);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
}

template <std::floating_point T>
Var add(Tape<T>& tape, Var a, Var b)
{
    detail::require_same_shape(tape.shape(a), tape.shape(b), "add");
    Tensor<T> y = tape.value(a);
    const auto& bv = tape.value(b).data;
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += bv[i];
    return tape.record(std::move(y), {a, b}, [a, b](Tape<T>& t, std::uint32_t self) {
        auto g = t.grad_of(self);
        for (Var v : {a, b}) {
            auto gx = t.grad_buffer(v.id);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        }
    });
}

template <std::floating_point T>
Var sub(Tape<T>& tape, Var a, Var b)
{
    detail::require_same_shape(tape.shape(a), tape.shape(b), "sub");
    Tensor<T> y = tape.value(a);
    const auto& bv = tape.value(b).data;
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] -= bv[i];
    return tape.record(std::move(y), {a, b}, [a, b](Tape<T>& t, std::uint32_t self) {
        auto g = t.grad_of(self);
        if (auto ga = t.grad_buffer(a.id); !ga.empty()) {
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (auto gb = t.grad_buffer(b.id); !gb.empty()) {
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <std::floating_point T>
Var mul(Tape<T>& tape, Var a, Var b)
{
    detail::require_same_shape(tape.shape(a), tape.shape(b), "mul");
    Tensor<T> y = tape.value(a);
    const auto& bv = tape.value(b).data;
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= bv[i];
    return tape.record(std::move(y), {a, b}, [a, b](Tape<T>& t, std::uint32_t self) {
        auto g = t.grad_of(self);
        const auto& av = t.value_of(a.id).data;
        const auto& bv2 = t.value_of(b.id).data;
        if (auto ga = t.grad_buffer(a.id); !ga.empty()) {
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (auto gb = t.grad_buffer(b.id); !gb.empty()) {
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <std::floating_point T>
Var scale(Tape<T>& tape, Var x, T s)
{
    Tensor<T> y = tape.value(x);
    for (T& v : y.data) v *= s;
    return tape.record(std::move(y), {x}, [x, s](Tape<T>& t, std::uint32_t self) {
        auto gx = t.grad_buffer(x.id);
        auto g = t.grad_of(self);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * g[i];
    });
}

/// Euclidean norm over the last dimension; output keeps a trailing dimension of 1.
/// The gradient at a zero vector is taken as zero.
template <std::floating_point T>
Var row_norm(Tape<T>& tape, Var x)
{
    const Tensor<T>& xv = tape.value(x);
    const std::size_t d = xv.last_dim();
    const std::size_t rows = xv.rows();
    Shape out_shape = xv.shape;
    if (out_shape.empty()) out_shape.push_back(1);
    out_shape.back() = 1;
    Tensor<T> y(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        T sq = 0;
        for (std::size_t j = 0; j < d; ++j) sq += xv.data[r * d + j] * xv.data[r * d + j];
        y.data[r] = std::sqrt(sq);
    }
    return tape.record(std::move(y), {x}, [x, d, rows](Tape<T>& t, std::uint32_t self) {
        auto gx = t.grad_buffer(x.id);
        auto g = t.grad_of(self);
        const auto& xv2 = t.value_of(x.id).data;
        const auto& yv = t.value_of(self).data;
        for (std::size_t r = 0; r < rows; ++r) {
            if (yv[r] == T(0)) continue;
            const T s = g[r] / yv[r];
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += s * xv2[r * d + j];
        }
    });
}

/// Sum of all elements, as a scalar of shape [1].
template <std::floating_point T>
Var sum_all(Tape<T>& tape, Var x)
{
    const auto& xv = tape.value(x).data;
    T s = 0;
    for (T v : xv) s += v;
    return tape.record(Tensor<T>({1}, {s}), {x}, [x](Tape<T>& t, std::uint32_t self) {
        auto gx = t.grad_buffer(x.id);
        const T g = t.grad_of(self)[0];
        for (T& v : gx) v += g;
    });
}

}  // namespace rmsflow
