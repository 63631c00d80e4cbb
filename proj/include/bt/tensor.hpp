// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with a reverse-mode tape. Values are immutable once created
// (parameter leaves excepted, see Tensor::mutable_data); every differentiable
// primitive records a backward rule on the thread's active Tape when one of
// its inputs requires gradients.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

namespace bt::ad {

using Shape = std::vector<std::int64_t>;
using NodeId = std::uint64_t;
inline constexpr NodeId kNoNode = 0;

enum class Precision : std::uint8_t { f32, f64 };

Precision default_precision();
void set_default_precision(Precision p);

// Switches the thread-independent default precision to 64-bit for its
// lifetime. Used by every finite-difference check.
class VerificationScope {
public:
    VerificationScope();
    ~VerificationScope();
    VerificationScope(const VerificationScope&) = delete;
    VerificationScope& operator=(const VerificationScope&) = delete;

private:
    Precision previous_;
};

// Finiteness assertion after every primitive. Defaults to on in debug builds.
bool finite_checks_enabled();
void set_finite_checks(bool on);

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, Precision p = default_precision());
    static Tensor full(Shape shape, double value, Precision p = default_precision());
    static Tensor from_values(Shape shape, std::span<const double> values,
                              Precision p = default_precision());
    static Tensor from_values(Shape shape, std::span<const float> values,
                              Precision p = default_precision());
    static Tensor scalar(double value, Precision p = default_precision());
    // Takes ownership of data without copying; precision follows the element type.
    static Tensor adopt(Shape shape, std::vector<float> data);
    static Tensor adopt(Shape shape, std::vector<double> data);

    // A fresh gradient-tracked leaf holding a copy of value's data.
    static Tensor parameter(const Tensor& value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    std::int64_t size(int axis) const;
    std::int64_t numel() const;
    Precision precision() const;
    bool requires_grad() const;
    bool is_leaf() const;
    NodeId id() const;

    template <class T>
    std::span<const T> data() const;

    // Converted copy of the values in row-major order.
    std::vector<double> values() const;
    double item() const;
    double flat(std::int64_t i) const;

    // In-place access for gradient-tracked leaves only (optimizer updates,
    // checkpoint restore, finite-difference probes).
    template <class T>
    std::span<T> mutable_data();

    // Same values, no gradient tracking.
    Tensor detach() const;
    Tensor to(Precision p) const;
    // Deep copy; parameters stay parameters (with a new id).
    Tensor clone() const;

    struct Impl;
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
    const std::shared_ptr<Impl>& impl() const { return impl_; }

private:
    std::shared_ptr<Impl> impl_;
};

// Boolean tensor used by masked_softmax. Its shape must equal the trailing
// dimensions of the scores it masks.
struct Mask {
    Shape shape;
    std::vector<std::uint8_t> allowed;

    static Mask all(Shape shape);
    bool at(std::int64_t flat) const { return allowed[static_cast<std::size_t>(flat)] != 0; }
};

class GradientMap {
public:
    // Gradient with respect to t; zeros when t did not influence the loss.
    Tensor operator[](const Tensor& t) const;
    bool contains(NodeId id) const { return grads_.count(id) != 0; }
    const std::unordered_map<NodeId, Tensor>& raw() const { return grads_; }

private:
    friend class Tape;
    std::unordered_map<NodeId, Tensor> grads_;
};

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_output)>;

// Append-only record of primitives. Constructing a Tape makes it the active
// tape of the constructing thread until it is destroyed.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return records_.size(); }
    GradientMap backward(const Tensor& loss);

    static Tape* active();

    // Registers output as computed from inputs. Returns the output, now
    // gradient-tracked, when a tape is active and an input requires grad;
    // returns it untouched otherwise. The backward rule returns one gradient
    // per input (undefined tensors for inputs that need none).
    static Tensor record(const std::vector<Tensor>& inputs, Tensor output, BackwardFn backward);

private:
    struct Record {
        NodeId output;
        std::vector<Tensor> inputs;
        BackwardFn backward;
        Shape output_shape;
        Precision precision;
    };
    std::vector<Record> records_;
    Tape* previous_ = nullptr;
    bool in_backward_ = false;
};

// Suspends recording on this thread for its lifetime.
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* saved_;
};

// --- primitives ------------------------------------------------------------

// [m,k]x[k,n], [B,m,k]x[B,k,n], or [B,m,k]x[k,n]. With transpose_b the
// right operand is read as its transpose over the last two axes.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

// b broadcasts into a: b's shape, right-aligned against a's, has extents
// equal to a's or 1 on every axis.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor masked_softmax(const Tensor& scores, const Mask* mask = nullptr);
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor slice(const Tensor& x, int axis, std::int64_t begin, std::int64_t end);
Tensor concat(const std::vector<Tensor>& parts, int axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// --- verification ---------------------------------------------------------

struct GradCheckOptions {
    double step = 1e-5;
    // Coordinates probed; every coordinate when the parameters hold fewer.
    std::size_t samples = 100;
    std::uint64_t seed = 0;
    // 2: central difference; 4: fourth-order central stencil.
    int order = 2;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    // Location of the worst coordinate.
    std::size_t worst_param = 0;
    std::int64_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Compares tape gradients of a scalar function against finite differences.
// f must rebuild its result from the current parameter values on every call.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                           const GradCheckOptions& options = {});

namespace faults {
// Deliberate defects used to show that grad_check detects broken rules.
enum class Fault { none, sigmoid_backward_sign };
void inject_fault(Fault f);
Fault active_fault();
} // namespace faults

} // namespace bt::ad
