#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace camnet {

// Error taxonomy used across the library.
struct ShapeError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ConfigError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NumericError : std::runtime_error { using std::runtime_error::runtime_error; };
struct FormatError : std::runtime_error { using std::runtime_error::runtime_error; };
struct CorruptionError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ParseError : std::runtime_error { using std::runtime_error::runtime_error; };
struct MissingDataError : std::runtime_error { using std::runtime_error::runtime_error; };

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d < 0) throw ShapeError("negative extent in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Runtime switch for finite-value checks on op outputs. Off by default;
// the test suites turn it on.
inline std::atomic<bool>& finite_checks() {
    static std::atomic<bool> flag{false};
    return flag;
}
inline void set_finite_checks(bool on) { finite_checks().store(on); }

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;   // empty until first needed; same length as value once allocated
    bool requires_grad = false;
    bool leaf = true;      // false for op outputs; leaves keep grads across backward calls

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

// Dense row-major tensor with shared storage. Copying a Tensor copies the
// handle, not the buffer; clone()/detach() copy the buffer.
template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->value.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
        t.d_->shape = std::move(shape);
        return t;
    }

    static Tensor full(Shape shape, T v) {
        Tensor t = zeros(std::move(shape));
        for (auto& x : t.d_->value) x = v;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->shape = std::move(shape);
        t.d_->value = std::move(data);
        return t;
    }

    static Tensor scalar(T v) { return from_data({1}, {v}); }

    bool defined() const { return static_cast<bool>(d_); }

    const Shape& shape() const { return d().shape; }
    int rank() const { return static_cast<int>(d().shape.size()); }
    int dim(int i) const { return d().shape.at(static_cast<std::size_t>(i)); }
    std::int64_t numel() const { return static_cast<std::int64_t>(d().value.size()); }

    T* data() { return d().value.data(); }
    const T* data() const { return d().value.data(); }
    std::vector<T>& values() { return d().value; }
    const std::vector<T>& values() const { return d().value; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return d().value[0];
    }

    bool requires_grad() const { return d().requires_grad; }
    Tensor& set_requires_grad(bool b) {
        d().requires_grad = b;
        if (b) d().ensure_grad();
        return *this;
    }

    bool is_leaf() const { return d().leaf; }
    void mark_nonleaf() { d().leaf = false; }

    std::vector<T>& grad() {
        d().ensure_grad();
        return d().grad;
    }
    const std::vector<T>* grad_if_any() const {
        return d().grad.empty() ? nullptr : &d().grad;
    }
    void zero_grad() {
        if (!d().grad.empty()) std::fill(d().grad.begin(), d().grad.end(), T(0));
    }

    // Value copy with no gradient tracking.
    Tensor detach() const {
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->shape = d().shape;
        t.d_->value = d().value;
        return t;
    }

    // Value copy preserving requires_grad (fresh leaf, fresh zero grad).
    Tensor clone() const {
        Tensor t = detach();
        if (d().requires_grad) t.set_requires_grad(true);
        return t;
    }

    std::shared_ptr<TensorData<T>> node() const { return d_; }
    bool same_storage(const Tensor& o) const { return d_ == o.d_; }

    void check_finite(const char* where) const {
        for (const T& v : d().value) {
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError(std::string("non-finite value in ") + where);
        }
    }

private:
    std::shared_ptr<TensorData<T>> d_;

    TensorData<T>& d() {
        if (!d_) throw ShapeError("use of undefined tensor");
        return *d_;
    }
    const TensorData<T>& d() const {
        if (!d_) throw ShapeError("use of undefined tensor");
        return *d_;
    }
};

template <typename T>
inline void maybe_check_finite(const Tensor<T>& t, const char* where) {
    if (finite_checks().load(std::memory_order_relaxed)) t.check_finite(where);
}

// Convert between scalar types (used by the double-precision check harness).
template <typename To, typename From>
inline Tensor<To> tensor_cast(const Tensor<From>& t) {
    std::vector<To> out(t.values().begin(), t.values().end());
    return Tensor<To>::from_data(t.shape(), std::move(out));
}

}  // namespace camnet
