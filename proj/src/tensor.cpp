// SPDX-License-Identifier: Apache-2.0
#include "bt/tensor.hpp"

#include "bt/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace bt::ad {

using Storage = std::variant<std::vector<float>, std::vector<double>>;

struct Tensor::Impl {
    Shape shape;
    std::shared_ptr<Storage> storage;
    bool requires_grad = false;
    bool leaf = true;
    NodeId id = kNoNode;
};

namespace {

std::atomic<Precision> g_precision{Precision::f32};
#ifdef NDEBUG
std::atomic<bool> g_finite_checks{false};
#else
std::atomic<bool> g_finite_checks{true};
#endif
std::atomic<NodeId> g_next_id{1};
std::atomic<faults::Fault> g_fault{faults::Fault::none};
thread_local Tape* t_active_tape = nullptr;

NodeId next_id() { return g_next_id.fetch_add(1); }

template <class T>
constexpr Precision precision_of() {
    return std::is_same_v<T, float> ? Precision::f32 : Precision::f64;
}

template <class F>
decltype(auto) dispatch(Precision p, F&& f) {
    if (p == Precision::f32) return f(float{});
    return f(double{});
}

template <class T>
const std::vector<T>& vec(const Tensor& t) {
    return std::get<std::vector<T>>(*t.impl()->storage);
}

template <class T>
Tensor make(Shape shape, std::vector<T> data) {
    auto impl = std::make_shared<Tensor::Impl>();
    impl->shape = std::move(shape);
    impl->storage = std::make_shared<Storage>(std::move(data));
    return Tensor(std::move(impl));
}

// Shares storage with x under a new shape.
Tensor view(const Tensor& x, Shape shape) {
    auto impl = std::make_shared<Tensor::Impl>();
    impl->shape = std::move(shape);
    impl->storage = x.impl()->storage;
    return Tensor(std::move(impl));
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void require_same_precision(const Tensor& a, const Tensor& b, const char* op) {
    if (a.precision() != b.precision())
        throw ContractError(std::string(op) + ": mixed precision operands");
}

Tensor checked(Tensor out, const char* op) {
    if (!g_finite_checks.load()) return out;
    dispatch(out.precision(), [&](auto tag) {
        using T = decltype(tag);
        for (T v : vec<T>(out))
            if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value after ") + op);
    });
    return out;
}

int normalize_axis(int axis, int rank) {
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) throw ShapeError("axis out of range");
    return a;
}

// Accumulates gradient g into slot (allocating on first use).
void accumulate(std::unordered_map<NodeId, Tensor>& grads, NodeId id, const Tensor& g) {
    auto it = grads.find(id);
    if (it == grads.end()) {
        grads.emplace(id, g);
        return;
    }
    const Tensor& prev = it->second;
    require(prev.shape() == g.shape(), "gradient shape mismatch");
    dispatch(prev.precision(), [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> out = vec<T>(prev);
        const auto& add = vec<T>(g);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += add[i];
        it->second = make<T>(prev.shape(), std::move(out));
    });
}

// --- broadcasting --------------------------------------------------------

struct BroadcastPlan {
    enum class Kind { same, suffix, leading, general } kind = Kind::same;
    std::int64_t b_numel = 1;
    std::int64_t inner = 1; // leading: a elements per b element
    Shape a_shape;
    std::vector<std::int64_t> b_strides; // aligned to a_shape, 0 on broadcast axes
};

BroadcastPlan plan_broadcast(const Shape& as, const Shape& bs) {
    require(bs.size() <= as.size(), "broadcast: operand rank exceeds target " + to_string(bs) +
                                        " into " + to_string(as));
    BroadcastPlan p;
    p.a_shape = as;
    p.b_numel = numel(bs);
    if (as == bs) return p;
    const std::size_t off = as.size() - bs.size();
    for (std::size_t i = 0; i < bs.size(); ++i)
        require(bs[i] == 1 || bs[i] == as[off + i],
                "broadcast: incompatible shapes " + to_string(bs) + " into " + to_string(as));
    // Trailing-dims match (bias style).
    std::size_t first = 0;
    while (first < bs.size() && bs[first] == 1) ++first;
    bool suffix = true;
    for (std::size_t i = first; i < bs.size(); ++i) suffix = suffix && bs[i] == as[off + i];
    if (suffix) {
        p.kind = BroadcastPlan::Kind::suffix;
        return p;
    }
    // Leading-dims match, ones afterwards (per-row scalars).
    std::size_t last = bs.size();
    while (last > 0 && bs[last - 1] == 1) --last;
    bool leading = true;
    for (std::size_t i = 0; i < last; ++i) leading = leading && bs[i] == as[off + i];
    if (leading && off == 0) {
        p.kind = BroadcastPlan::Kind::leading;
        p.inner = numel(as) / std::max<std::int64_t>(1, p.b_numel);
        return p;
    }
    p.kind = BroadcastPlan::Kind::general;
    p.b_strides.assign(as.size(), 0);
    std::int64_t stride = 1;
    for (std::size_t i = bs.size(); i-- > 0;) {
        p.b_strides[off + i] = bs[i] == 1 ? 0 : stride;
        stride *= bs[i];
    }
    return p;
}

// Calls fn(i, j) for every flat index i of a and the index j of b it reads.
template <class Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
    const std::int64_t n = numel(p.a_shape);
    switch (p.kind) {
    case BroadcastPlan::Kind::same:
        for (std::int64_t i = 0; i < n; ++i) fn(i, i);
        return;
    case BroadcastPlan::Kind::suffix:
        for (std::int64_t i = 0; i < n; ++i) fn(i, i % p.b_numel);
        return;
    case BroadcastPlan::Kind::leading:
        for (std::int64_t i = 0; i < n; ++i) fn(i, i / p.inner);
        return;
    case BroadcastPlan::Kind::general: {
        const std::size_t r = p.a_shape.size();
        std::vector<std::int64_t> idx(r, 0);
        std::int64_t j = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            fn(i, j);
            for (std::size_t d = r; d-- > 0;) {
                ++idx[d];
                j += p.b_strides[d];
                if (idx[d] < p.a_shape[d]) break;
                j -= p.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        return;
    }
    }
}

template <class T>
Tensor reduce_to(const Tensor& g, const BroadcastPlan& p, const Shape& bs) {
    if (p.kind == BroadcastPlan::Kind::same) return g;
    std::vector<T> out(static_cast<std::size_t>(p.b_numel), T(0));
    const auto& gv = vec<T>(g);
    for_each_broadcast(p, [&](std::int64_t i, std::int64_t j) { out[j] += gv[i]; });
    return make<T>(bs, std::move(out));
}

// Strided permutation: out[i] = in[src(i)] for a two-axis swap.
template <class T>
std::vector<T> swap_axes(const std::vector<T>& in, const Shape& shape, int a0, int a1) {
    const std::size_t r = shape.size();
    Shape out_shape = shape;
    std::swap(out_shape[a0], out_shape[a1]);
    std::vector<std::int64_t> in_strides(r, 1);
    for (std::size_t d = r - 1; d-- > 0;) in_strides[d] = in_strides[d + 1] * shape[d + 1];
    std::vector<std::int64_t> strides = in_strides;
    std::swap(strides[a0], strides[a1]);
    std::vector<T> out(in.size());
    // Innermost contiguous run is copied as a block when the last axis is untouched.
    const bool last_fixed = a0 != static_cast<int>(r) - 1 && a1 != static_cast<int>(r) - 1;
    const std::int64_t run = last_fixed ? shape[r - 1] : 1;
    const std::size_t outer_rank = last_fixed ? r - 1 : r;
    std::vector<std::int64_t> idx(outer_rank, 0);
    std::int64_t src = 0;
    const std::int64_t n = static_cast<std::int64_t>(in.size()) / run;
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(in.begin() + src, run, out.begin() + i * run);
        for (std::size_t d = outer_rank; d-- > 0;) {
            ++idx[d];
            src += strides[d];
            if (idx[d] < out_shape[d]) break;
            src -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    return out;
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

template <class T>
T sigmoid_scalar(T x) {
    if (x >= 0) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
T softplus_scalar(T x) {
    if (x > T(20)) return x;
    return std::log1p(std::exp(x));
}

} // namespace

// --- configuration ---------------------------------------------------------

Precision default_precision() { return g_precision.load(); }
void set_default_precision(Precision p) { g_precision.store(p); }

VerificationScope::VerificationScope() : previous_(default_precision()) {
    set_default_precision(Precision::f64);
}
VerificationScope::~VerificationScope() { set_default_precision(previous_); }

bool finite_checks_enabled() { return g_finite_checks.load(); }
void set_finite_checks(bool on) { g_finite_checks.store(on); }

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace faults {
void inject_fault(Fault f) { g_fault.store(f); }
Fault active_fault() { return g_fault.load(); }
} // namespace faults

// --- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, Precision p) { return full(std::move(shape), 0.0, p); }

Tensor Tensor::full(Shape shape, double value, Precision p) {
    for (auto d : shape)
        if (d <= 0) throw ShapeError("extents must be positive: " + to_string(shape));
    const auto n = static_cast<std::size_t>(ad::numel(shape));
    return dispatch(p, [&](auto tag) {
        using T = decltype(tag);
        return make<T>(std::move(shape), std::vector<T>(n, static_cast<T>(value)));
    });
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, Precision p) {
    if (ad::numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("value count does not match shape " + to_string(shape));
    return dispatch(p, [&](auto tag) {
        using T = decltype(tag);
        return make<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
    });
}

Tensor Tensor::from_values(Shape shape, std::span<const float> values, Precision p) {
    if (ad::numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("value count does not match shape " + to_string(shape));
    return dispatch(p, [&](auto tag) {
        using T = decltype(tag);
        return make<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
    });
}

Tensor Tensor::scalar(double value, Precision p) { return full({}, value, p); }

Tensor Tensor::adopt(Shape shape, std::vector<float> data) {
    if (ad::numel(shape) != static_cast<std::int64_t>(data.size()))
        throw ShapeError("value count does not match shape " + to_string(shape));
    return make<float>(std::move(shape), std::move(data));
}

Tensor Tensor::adopt(Shape shape, std::vector<double> data) {
    if (ad::numel(shape) != static_cast<std::int64_t>(data.size()))
        throw ShapeError("value count does not match shape " + to_string(shape));
    return make<double>(std::move(shape), std::move(data));
}

Tensor Tensor::parameter(const Tensor& value) {
    require_defined(value, "parameter");
    auto impl = std::make_shared<Impl>();
    impl->shape = value.shape();
    impl->storage = std::make_shared<Storage>(*value.impl_->storage);
    impl->requires_grad = true;
    impl->leaf = true;
    impl->id = next_id();
    return Tensor(std::move(impl));
}

const Shape& Tensor::shape() const {
    static const Shape empty;
    return impl_ ? impl_->shape : empty;
}

std::int64_t Tensor::size(int axis) const { return shape()[normalize_axis(axis, rank())]; }
std::int64_t Tensor::numel() const { return ad::numel(shape()); }

Precision Tensor::precision() const {
    return std::holds_alternative<std::vector<float>>(*impl_->storage) ? Precision::f32
                                                                        : Precision::f64;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
bool Tensor::is_leaf() const { return impl_ && impl_->leaf; }
NodeId Tensor::id() const { return impl_ ? impl_->id : kNoNode; }

template <class T>
std::span<const T> Tensor::data() const {
    const auto* v = std::get_if<std::vector<T>>(impl_->storage.get());
    if (!v) throw ContractError("data(): requested element type does not match precision");
    return {v->data(), v->size()};
}
template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;

template <class T>
std::span<T> Tensor::mutable_data() {
    if (!impl_ || !impl_->leaf)
        throw ContractError("mutable_data(): only leaf tensors may be modified in place");
    if (impl_->storage.use_count() > 1) impl_->storage = std::make_shared<Storage>(*impl_->storage);
    auto* v = std::get_if<std::vector<T>>(impl_->storage.get());
    if (!v) throw ContractError("mutable_data(): requested element type does not match precision");
    return {v->data(), v->size()};
}
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

std::vector<double> Tensor::values() const {
    return dispatch(precision(), [&](auto tag) {
        using T = decltype(tag);
        const auto& v = vec<T>(*this);
        return std::vector<double>(v.begin(), v.end());
    });
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return flat(0);
}

double Tensor::flat(std::int64_t i) const {
    return dispatch(precision(), [&](auto tag) {
        using T = decltype(tag);
        return static_cast<double>(vec<T>(*this).at(static_cast<std::size_t>(i)));
    });
}

Tensor Tensor::detach() const {
    require_defined(*this, "detach");
    return view(*this, shape());
}

Tensor Tensor::to(Precision p) const {
    require_defined(*this, "to");
    if (p == precision()) return detach();
    return dispatch(precision(), [&](auto tag) {
        using T = decltype(tag);
        return from_values(shape(), std::span<const T>(vec<T>(*this)), p);
    });
}

Tensor Tensor::clone() const {
    require_defined(*this, "clone");
    if (requires_grad() && is_leaf()) return parameter(*this);
    auto impl = std::make_shared<Impl>();
    impl->shape = shape();
    impl->storage = std::make_shared<Storage>(*impl_->storage);
    return Tensor(std::move(impl));
}

Mask Mask::all(Shape shape) {
    Mask m;
    m.allowed.assign(static_cast<std::size_t>(numel(shape)), 1);
    m.shape = std::move(shape);
    return m;
}

// --- Tape ----------------------------------------------------------------------

Tensor GradientMap::operator[](const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (t.id() != kNoNode && it != grads_.end()) return it->second;
    return Tensor::zeros(t.shape(), t.precision());
}

Tape::Tape() : previous_(t_active_tape) { t_active_tape = this; }

Tape::~Tape() {
    if (t_active_tape == this) t_active_tape = previous_;
}

Tape* Tape::active() { return t_active_tape; }

NoGradScope::NoGradScope() : saved_(t_active_tape) { t_active_tape = nullptr; }
NoGradScope::~NoGradScope() { t_active_tape = saved_; }

Tensor Tape::record(const std::vector<Tensor>& inputs, Tensor output, BackwardFn backward) {
    Tape* tape = t_active_tape;
    if (!tape || tape->in_backward_) return output;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return output;
    if (output.impl()->requires_grad || output.impl()->id != kNoNode)
        throw ContractError("record(): output already tracked");
    output.impl()->requires_grad = true;
    output.impl()->leaf = false;
    output.impl()->id = next_id();
    tape->records_.push_back(
        Record{output.id(), inputs, std::move(backward), output.shape(), output.precision()});
    return output;
}

GradientMap Tape::backward(const Tensor& loss) {
    require_defined(loss, "backward");
    if (loss.numel() != 1)
        throw ContractError("backward(): loss must be a scalar, got shape " + to_string(loss.shape()));
    GradientMap result;
    if (!loss.requires_grad()) return result;
    result.grads_.emplace(loss.id(), Tensor::full(loss.shape(), 1.0, loss.precision()));
    in_backward_ = true;
    struct Reset {
        bool& flag;
        ~Reset() { flag = false; }
    } reset{in_backward_};
    for (auto rec = records_.rbegin(); rec != records_.rend(); ++rec) {
        auto it = result.grads_.find(rec->output);
        if (it == result.grads_.end()) continue;
        const Tensor grad_out = it->second;
        std::vector<Tensor> grads = rec->backward(grad_out);
        if (grads.size() != rec->inputs.size())
            throw ContractError("backward rule returned wrong gradient count");
        for (std::size_t i = 0; i < grads.size(); ++i) {
            const Tensor& in = rec->inputs[i];
            if (!in.requires_grad() || !grads[i].defined()) continue;
            require(grads[i].shape() == in.shape(), "backward rule produced gradient of shape " +
                                                         to_string(grads[i].shape()) + " for input " +
                                                         to_string(in.shape()));
            accumulate(result.grads_, in.id(), grads[i]);
        }
    }
    return result;
}

// --- primitives ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    require_same_precision(a, b, "matmul");
    const int ra = a.rank(), rb = b.rank();
    require((ra == 2 && rb == 2) || (ra == 3 && (rb == 3 || rb == 2)),
            "matmul: unsupported ranks " + to_string(a.shape()) + " x " + to_string(b.shape()));
    const bool shared_b = ra == 3 && rb == 2;
    const std::int64_t batch = ra == 3 ? a.size(0) : 1;
    if (ra == 3 && rb == 3) require(b.size(0) == batch, "matmul: batch extents differ");
    const std::int64_t m = shared_b ? a.size(0) * a.size(1) : a.size(-2);
    const std::int64_t k = a.size(-1);
    const std::int64_t bk = transpose_b ? b.size(-1) : b.size(-2);
    const std::int64_t n = transpose_b ? b.size(-2) : b.size(-1);
    require(k == bk, "matmul: inner extents differ " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
    const std::int64_t batches = shared_b ? 1 : batch;

    Shape out_shape = ra == 3 ? Shape{batch, a.size(1), n} : Shape{m, n};
    Tensor out = dispatch(a.precision(), [&](auto tag) {
        using T = decltype(tag);
        const auto& av = vec<T>(a);
        const auto& bv = vec<T>(b);
        std::vector<T> ov(static_cast<std::size_t>(batches * m * n));
        for (std::int64_t s = 0; s < batches; ++s) {
            ConstMap<T> A(av.data() + s * m * k, m, k);
            MutMap<T> C(ov.data() + s * m * n, m, n);
            if (transpose_b) {
                ConstMap<T> B(bv.data() + s * n * k, n, k);
                C.noalias() = A * B.transpose();
            } else {
                ConstMap<T> B(bv.data() + s * k * n, k, n);
                C.noalias() = A * B;
            }
        }
        return make<T>(out_shape, std::move(ov));
    });
    out = checked(std::move(out), "matmul");
    return Tape::record({a, b}, out, [a, b, transpose_b, batches, m, k, n](const Tensor& g) {
        return dispatch(a.precision(), [&](auto tag) {
            using T = decltype(tag);
            const auto& av = vec<T>(a);
            const auto& bv = vec<T>(b);
            const auto& gv = vec<T>(g);
            std::vector<Tensor> grads(2);
            if (a.requires_grad()) {
                std::vector<T> da(av.size());
                for (std::int64_t s = 0; s < batches; ++s) {
                    ConstMap<T> G(gv.data() + s * m * n, m, n);
                    MutMap<T> DA(da.data() + s * m * k, m, k);
                    if (transpose_b)
                        DA.noalias() = G * ConstMap<T>(bv.data() + s * n * k, n, k);
                    else
                        DA.noalias() = G * ConstMap<T>(bv.data() + s * k * n, k, n).transpose();
                }
                grads[0] = make<T>(a.shape(), std::move(da));
            }
            if (b.requires_grad()) {
                std::vector<T> db(bv.size());
                for (std::int64_t s = 0; s < batches; ++s) {
                    ConstMap<T> A(av.data() + s * m * k, m, k);
                    ConstMap<T> G(gv.data() + s * m * n, m, n);
                    if (transpose_b)
                        MutMap<T>(db.data() + s * n * k, n, k).noalias() = G.transpose() * A;
                    else
                        MutMap<T>(db.data() + s * k * n, k, n).noalias() = A.transpose() * G;
                }
                grads[1] = make<T>(b.shape(), std::move(db));
            }
            return grads;
        });
    });
}

namespace {

enum class Binary { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, Binary op, const char* name) {
    require_defined(a, name);
    require_defined(b, name);
    require_same_precision(a, b, name);
    auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
    Tensor out = dispatch(a.precision(), [&](auto tag) {
        using T = decltype(tag);
        const auto& av = vec<T>(a);
        const auto& bv = vec<T>(b);
        std::vector<T> ov(av.size());
        switch (op) {
        case Binary::add:
            for_each_broadcast(*plan, [&](std::int64_t i, std::int64_t j) { ov[i] = av[i] + bv[j]; });
            break;
        case Binary::sub:
            for_each_broadcast(*plan, [&](std::int64_t i, std::int64_t j) { ov[i] = av[i] - bv[j]; });
            break;
        case Binary::mul:
            for_each_broadcast(*plan, [&](std::int64_t i, std::int64_t j) { ov[i] = av[i] * bv[j]; });
            break;
        }
        return make<T>(a.shape(), std::move(ov));
    });
    out = checked(std::move(out), name);
    return Tape::record({a, b}, out, [a, b, op, plan](const Tensor& g) {
        return dispatch(a.precision(), [&](auto tag) {
            using T = decltype(tag);
            std::vector<Tensor> grads(2);
            const auto& gv = vec<T>(g);
            if (op == Binary::mul) {
                const auto& av = vec<T>(a);
                const auto& bv = vec<T>(b);
                if (a.requires_grad()) {
                    std::vector<T> da(av.size());
                    for_each_broadcast(*plan, [&](std::int64_t i, std::int64_t j) { da[i] = gv[i] * bv[j]; });
                    grads[0] = make<T>(a.shape(), std::move(da));
                }
                if (b.requires_grad()) {
                    std::vector<T> db(bv.size(), T(0));
                    for_each_broadcast(*plan, [&](std::int64_t i, std::int64_t j) { db[j] += gv[i] * av[i]; });
                    grads[1] = make<T>(b.shape(), std::move(db));
                }
                return grads;
            }
            if (a.requires_grad()) grads[0] = g;
            if (b.requires_grad()) {
                Tensor gb = reduce_to<T>(g, *plan, b.shape());
                if (op == Binary::sub) {
                    std::vector<T> neg = vec<T>(gb);
                    for (auto& v : neg) v = -v;
                    gb = make<T>(b.shape(), std::move(neg));
                }
                grads[1] = gb;
            }
            return grads;
        });
    });
}

// Element-wise map with derivative expressed through input and output values.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
    require_defined(x, name);
    Tensor out = dispatch(x.precision(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = vec<T>(x);
        std::vector<T> ov(xv.size());
        for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
        return make<T>(x.shape(), std::move(ov));
    });
    out = checked(std::move(out), name);
    Tensor keep = out.detach();
    return Tape::record({x}, out, [x, keep, deriv](const Tensor& g) {
        return dispatch(x.precision(), [&](auto tag) {
            using T = decltype(tag);
            const auto& xv = vec<T>(x);
            const auto& yv = vec<T>(keep);
            const auto& gv = vec<T>(g);
            std::vector<T> dx(xv.size());
            for (std::size_t i = 0; i < xv.size(); ++i) dx[i] = gv[i] * deriv(xv[i], yv[i]);
            return std::vector<Tensor>{make<T>(x.shape(), std::move(dx))};
        });
    });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::mul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
    return unary(
        x, "scale", [factor](auto v) { return static_cast<decltype(v)>(v * factor); },
        [factor](auto v, auto) { return static_cast<decltype(v)>(factor); });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x, "sigmoid", [](auto v) { return sigmoid_scalar(v); },
        [](auto, auto y) {
            const auto d = y * (decltype(y)(1) - y);
            return faults::active_fault() == faults::Fault::sigmoid_backward_sign ? -d : d;
        });
}

Tensor softplus(const Tensor& x) {
    return unary(
        x, "softplus", [](auto v) { return softplus_scalar(v); },
        [](auto v, auto) { return sigmoid_scalar(v); });
}

Tensor gelu(const Tensor& x) {
    return unary(
        x, "gelu",
        [](auto v) {
            using T = decltype(v);
            return T(0.5) * v * (T(1) + std::erf(v * T(M_SQRT1_2)));
        },
        [](auto v, auto) {
            using T = decltype(v);
            const T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
            const T pdf = std::exp(T(-0.5) * v * v) * T(0.3989422804014327);
            return cdf + v * pdf;
        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_defined(x, "layer_norm");
    require(x.rank() >= 1, "layer_norm: rank 0 input");
    const std::int64_t d = x.size(-1);
    require(d >= 1 && gain.shape() == Shape{d} && bias.shape() == Shape{d},
            "layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
    require_same_precision(x, gain, "layer_norm");
    require_same_precision(x, bias, "layer_norm");
    const std::int64_t rows = x.numel() / d;

    struct Saved {
        Tensor xhat;
        std::vector<double> inv_std;
    };
    auto saved = std::make_shared<Saved>();
    Tensor out = dispatch(x.precision(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = vec<T>(x);
        const auto& gv = vec<T>(gain);
        const auto& bv = vec<T>(bias);
        std::vector<T> xh(xv.size()), ov(xv.size());
        saved->inv_std.resize(static_cast<std::size_t>(rows));
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* row = xv.data() + r * d;
            double mu = 0.0;
            for (std::int64_t j = 0; j < d; ++j) mu += row[j];
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
            var /= static_cast<double>(d);
            const double inv = 1.0 / std::sqrt(var + eps);
            saved->inv_std[r] = inv;
            for (std::int64_t j = 0; j < d; ++j) {
                const T h = static_cast<T>((row[j] - mu) * inv);
                xh[r * d + j] = h;
                ov[r * d + j] = h * gv[j] + bv[j];
            }
        }
        saved->xhat = make<T>(x.shape(), std::move(xh));
        return make<T>(x.shape(), std::move(ov));
    });
    out = checked(std::move(out), "layer_norm");
    return Tape::record({x, gain, bias}, out, [x, gain, bias, saved, d, rows](const Tensor& g) {
        return dispatch(x.precision(), [&](auto tag) {
            using T = decltype(tag);
            const auto& gv = vec<T>(g);
            const auto& xh = vec<T>(saved->xhat);
            const auto& gain_v = vec<T>(gain);
            std::vector<T> dx(gv.size()), dgain(static_cast<std::size_t>(d), T(0)),
                dbias(static_cast<std::size_t>(d), T(0));
            std::vector<double> dxh(static_cast<std::size_t>(d));
            for (std::int64_t r = 0; r < rows; ++r) {
                double m1 = 0.0, m2 = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const std::size_t i = static_cast<std::size_t>(r * d + j);
                    dxh[j] = static_cast<double>(gv[i]) * gain_v[j];
                    m1 += dxh[j];
                    m2 += dxh[j] * xh[i];
                    dgain[j] += gv[i] * xh[i];
                    dbias[j] += gv[i];
                }
                m1 /= static_cast<double>(d);
                m2 /= static_cast<double>(d);
                const double inv = saved->inv_std[r];
                for (std::int64_t j = 0; j < d; ++j) {
                    const std::size_t i = static_cast<std::size_t>(r * d + j);
                    dx[i] = static_cast<T>(inv * (dxh[j] - m1 - xh[i] * m2));
                }
            }
            return std::vector<Tensor>{make<T>(x.shape(), std::move(dx)),
                                       make<T>(gain.shape(), std::move(dgain)),
                                       make<T>(bias.shape(), std::move(dbias))};
        });
    });
}

Tensor masked_softmax(const Tensor& scores, const Mask* mask) {
    require_defined(scores, "masked_softmax");
    require(scores.rank() >= 1, "masked_softmax: rank 0 input");
    const std::int64_t n = scores.size(-1);
    const std::int64_t rows = scores.numel() / n;
    std::int64_t mask_size = 0;
    if (mask) {
        const Shape& ms = mask->shape;
        const Shape& ss = scores.shape();
        require(!ms.empty() && ms.size() <= ss.size() &&
                    std::equal(ms.begin(), ms.end(), ss.end() - static_cast<std::ptrdiff_t>(ms.size())),
                "masked_softmax: mask shape " + to_string(ms) + " does not match trailing dims of " +
                    to_string(ss));
        mask_size = numel(ms);
    }
    Tensor out = dispatch(scores.precision(), [&](auto tag) {
        using T = decltype(tag);
        const auto& sv = vec<T>(scores);
        std::vector<T> ov(sv.size(), T(0));
        for (std::int64_t r = 0; r < rows; ++r) {
            const std::int64_t base = r * n;
            const std::int64_t mbase = mask ? base % mask_size : 0;
            auto allowed = [&](std::int64_t j) { return !mask || mask->at(mbase + j); };
            T mx = -std::numeric_limits<T>::infinity();
            for (std::int64_t j = 0; j < n; ++j)
                if (allowed(j)) mx = std::max(mx, sv[base + j]);
            if (mx == -std::numeric_limits<T>::infinity())
                throw InvalidMaskError("masked_softmax: row " + std::to_string(r) +
                                       " has no unmasked entry");
            T total = 0;
            for (std::int64_t j = 0; j < n; ++j)
                if (allowed(j)) {
                    ov[base + j] = std::exp(sv[base + j] - mx);
                    total += ov[base + j];
                }
            const T inv = T(1) / total;
            for (std::int64_t j = 0; j < n; ++j) ov[base + j] *= inv;
        }
        return make<T>(scores.shape(), std::move(ov));
    });
    out = checked(std::move(out), "masked_softmax");
    Tensor keep = out.detach();
    return Tape::record({scores}, out, [scores, keep, n, rows](const Tensor& g) {
        return dispatch(scores.precision(), [&](auto tag) {
            using T = decltype(tag);
            const auto& y = vec<T>(keep);
            const auto& gv = vec<T>(g);
            std::vector<T> dx(y.size());
            for (std::int64_t r = 0; r < rows; ++r) {
                const std::int64_t base = r * n;
                T dot = 0;
                for (std::int64_t j = 0; j < n; ++j) dot += y[base + j] * gv[base + j];
                for (std::int64_t j = 0; j < n; ++j) dx[base + j] = y[base + j] * (gv[base + j] - dot);
            }
            return std::vector<Tensor>{make<T>(scores.shape(), std::move(dx))};
        });
    });
}

Tensor l2_normalize(const Tensor& x, double eps) {
    require_defined(x, "l2_normalize");
    require(x.rank() >= 1, "l2_normalize: rank 0 input");
    const std::int64_t d = x.size(-1);
    const std::int64_t rows = x.numel() / d;
    auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    Tensor out = dispatch(x.precision(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = vec<T>(x);
        std::vector<T> ov(xv.size());
        for (std::int64_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::int64_t j = 0; j < d; ++j) s += static_cast<double>(xv[r * d + j]) * xv[r * d + j];
            const double nrm = std::sqrt(s + eps);
            (*norms)[r] = nrm;
            for (std::int64_t j = 0; j < d; ++j) ov[r * d + j] = static_cast<T>(xv[r * d + j] / nrm);
        }
        return make<T>(x.shape(), std::move(ov));
    });
    out = checked(std::move(out), "l2_normalize");
    Tensor keep = out.detach();
    return Tape::record({x}, out, [x, keep, norms, d, rows](const Tensor& g) {
        return dispatch(x.precision(), [&](auto tag) {
            using T = decltype(tag);
            const auto& y = vec<T>(keep);
            const auto& gv = vec<T>(g);
            std::vector<T> dx(y.size());
            for (std::int64_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::int64_t j = 0; j < d; ++j) dot += static_cast<double>(y[r * d + j]) * gv[r * d + j];
                const double inv = 1.0 / (*norms)[r];
                for (std::int64_t j = 0; j < d; ++j)
                    dx[r * d + j] = static_cast<T>((gv[r * d + j] - y[r * d + j] * dot) * inv);
            }
            return std::vector<Tensor>{make<T>(x.shape(), std::move(dx))};
        });
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    require_defined(x, "reshape");
    for (auto d : shape) require(d > 0, "reshape: extents must be positive");
    require(numel(shape) == x.numel(),
            "reshape: " + to_string(x.shape()) + " cannot become " + to_string(shape));
    Tensor out = view(x, shape);
    const Shape in_shape = x.shape();
    return Tape::record({x}, out, [in_shape](const Tensor& g) {
        return std::vector<Tensor>{view(g, in_shape)};
    });
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
    require_defined(x, "transpose");
    const int a0 = normalize_axis(axis0, x.rank());
    const int a1 = normalize_axis(axis1, x.rank());
    if (a0 == a1) return reshape(x, x.shape());
    Shape out_shape = x.shape();
    std::swap(out_shape[a0], out_shape[a1]);
    Tensor out = dispatch(x.precision(), [&](auto tag) {
        using T = decltype(tag);
        return make<T>(out_shape, swap_axes(vec<T>(x), x.shape(), a0, a1));
    });
    return Tape::record({x}, out, [out_shape, a0, a1](const Tensor& g) {
        return dispatch(g.precision(), [&](auto tag) {
            using T = decltype(tag);
            Shape back = out_shape;
            std::swap(back[a0], back[a1]);
            return std::vector<Tensor>{make<T>(back, swap_axes(vec<T>(g), out_shape, a0, a1))};
        });
    });
}

Tensor slice(const Tensor& x, int axis, std::int64_t begin, std::int64_t end) {
    require_defined(x, "slice");
    const int ax = normalize_axis(axis, x.rank());
    const std::int64_t extent = x.size(ax);
    require(0 <= begin && begin < end && end <= extent,
            "slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                ") invalid for extent " + std::to_string(extent));
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < ax; ++d) outer *= x.size(d);
    for (int d = ax + 1; d < x.rank(); ++d) inner *= x.size(d);
    Shape out_shape = x.shape();
    out_shape[ax] = end - begin;
    const std::int64_t len = (end - begin) * inner;
    Tensor out = dispatch(x.precision(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = vec<T>(x);
        std::vector<T> ov(static_cast<std::size_t>(outer * len));
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(xv.begin() + o * extent * inner + begin * inner, len, ov.begin() + o * len);
        return make<T>(out_shape, std::move(ov));
    });
    const Shape in_shape = x.shape();
    return Tape::record({x}, out, [in_shape, outer, inner, extent, begin, len](const Tensor& g) {
        return dispatch(g.precision(), [&](auto tag) {
            using T = decltype(tag);
            const auto& gv = vec<T>(g);
            std::vector<T> dx(static_cast<std::size_t>(numel(in_shape)), T(0));
            for (std::int64_t o = 0; o < outer; ++o)
                std::copy_n(gv.begin() + o * len, len, dx.begin() + o * extent * inner + begin * inner);
            return std::vector<Tensor>{make<T>(in_shape, std::move(dx))};
        });
    });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    for (const auto& p : parts) require_defined(p, "concat");
    const Tensor& first = parts.front();
    const int ax = normalize_axis(axis, first.rank());
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < ax; ++d) outer *= first.size(d);
    for (int d = ax + 1; d < first.rank(); ++d) inner *= first.size(d);
    std::vector<std::int64_t> extents;
    std::int64_t total = 0;
    for (const auto& p : parts) {
        require_same_precision(first, p, "concat");
        require(p.rank() == first.rank(), "concat: rank mismatch");
        for (int d = 0; d < first.rank(); ++d)
            if (d != ax)
                require(p.size(d) == first.size(d), "concat: extent mismatch on axis " + std::to_string(d));
        extents.push_back(p.size(ax));
        total += p.size(ax);
    }
    Shape out_shape = first.shape();
    out_shape[ax] = total;
    Tensor out = dispatch(first.precision(), [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> ov(static_cast<std::size_t>(outer * total * inner));
        std::int64_t offset = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            const auto& pv = vec<T>(parts[p]);
            const std::int64_t len = extents[p] * inner;
            for (std::int64_t o = 0; o < outer; ++o)
                std::copy_n(pv.begin() + o * len, len, ov.begin() + o * total * inner + offset * inner);
            offset += extents[p];
        }
        return make<T>(out_shape, std::move(ov));
    });
    std::vector<Shape> shapes;
    for (const auto& p : parts) shapes.push_back(p.shape());
    return Tape::record(parts, out, [shapes, extents, outer, inner, total](const Tensor& g) {
        return dispatch(g.precision(), [&](auto tag) {
            using T = decltype(tag);
            const auto& gv = vec<T>(g);
            std::vector<Tensor> grads;
            std::int64_t offset = 0;
            for (std::size_t p = 0; p < shapes.size(); ++p) {
                const std::int64_t len = extents[p] * inner;
                std::vector<T> dp(static_cast<std::size_t>(outer * len));
                for (std::int64_t o = 0; o < outer; ++o)
                    std::copy_n(gv.begin() + o * total * inner + offset * inner, len, dp.begin() + o * len);
                grads.push_back(make<T>(shapes[p], std::move(dp)));
                offset += extents[p];
            }
            return grads;
        });
    });
}

namespace {

Tensor reduce_all(const Tensor& x, bool average) {
    require_defined(x, average ? "mean" : "sum");
    const double denom = average ? static_cast<double>(x.numel()) : 1.0;
    Tensor out = dispatch(x.precision(), [&](auto tag) {
        using T = decltype(tag);
        double s = 0.0;
        for (T v : vec<T>(x)) s += v;
        return make<T>({}, std::vector<T>{static_cast<T>(s / denom)});
    });
    out = checked(std::move(out), average ? "mean" : "sum");
    const Shape in_shape = x.shape();
    return Tape::record({x}, out, [in_shape, denom](const Tensor& g) {
        return dispatch(g.precision(), [&](auto tag) {
            using T = decltype(tag);
            const T v = static_cast<T>(vec<T>(g)[0] / denom);
            return std::vector<Tensor>{make<T>(in_shape, std::vector<T>(static_cast<std::size_t>(numel(in_shape)), v))};
        });
    });
}

} // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, false); }
Tensor mean(const Tensor& x) { return reduce_all(x, true); }

// --- grad_check ---------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                           const GradCheckOptions& options) {
    for (const auto& p : params)
        if (!p.requires_grad() || !p.is_leaf())
            throw ContractError("grad_check: parameters must be gradient-tracked leaves");
    if (options.order != 2 && options.order != 4)
        throw ContractError("grad_check: order must be 2 or 4");

    GradientMap grads;
    {
        Tape tape;
        const Tensor loss = f();
        grads = tape.backward(loss);
    }

    std::vector<std::pair<std::size_t, std::int64_t>> coords;
    std::int64_t total = 0;
    for (const auto& p : params) total += p.numel();
    if (static_cast<std::size_t>(total) <= options.samples) {
        for (std::size_t i = 0; i < params.size(); ++i)
            for (std::int64_t j = 0; j < params[i].numel(); ++j) coords.emplace_back(i, j);
    } else {
        std::mt19937_64 rng(options.seed);
        std::vector<std::int64_t> flat(static_cast<std::size_t>(total));
        std::iota(flat.begin(), flat.end(), 0);
        std::shuffle(flat.begin(), flat.end(), rng);
        flat.resize(options.samples);
        std::sort(flat.begin(), flat.end());
        for (std::int64_t g : flat) {
            std::size_t i = 0;
            while (g >= params[i].numel()) g -= params[i++].numel();
            coords.emplace_back(i, g);
        }
    }

    NoGradScope no_grad;
    auto eval = [&] { return f().item(); };
    GradCheckReport report;
    const double h = options.step;
    for (auto [pi, idx] : coords) {
        Tensor& p = params[pi];
        const double analytic = grads[p].flat(idx);
        const double numeric = dispatch(p.precision(), [&](auto tag) {
            using T = decltype(tag);
            auto data = p.mutable_data<T>();
            const T orig = data[idx];
            auto at = [&](double delta) {
                data[idx] = static_cast<T>(orig + delta);
                const double v = eval();
                data[idx] = orig;
                return v;
            };
            if (options.order == 2) return (at(h) - at(-h)) / (2.0 * h);
            return (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12.0 * h);
        });
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        const double rel = std::abs(analytic - numeric) / denom;
        ++report.checked;
        if (rel >= report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_param = pi;
            report.worst_index = idx;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    return report;
}

} // namespace bt::ad
