#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace biascope {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major tensor. Copies are shallow: they share the value buffer
// and the gradient buffer, which is what ties tape nodes to the leaves they
// must update. Gradient buffers exist only while requires_grad is set.
template <typename T>
struct TensorT {
    std::vector<int64_t> shape;
    std::shared_ptr<std::vector<T>> data;
    std::shared_ptr<std::vector<T>> grad;
    bool requires_grad = false;

    TensorT() = default;

    static TensorT zeros(std::vector<int64_t> shape) {
        TensorT t;
        t.shape = std::move(shape);
        t.data = std::make_shared<std::vector<T>>(static_cast<size_t>(numel_of(t.shape)), T(0));
        return t;
    }

    static TensorT full(std::vector<int64_t> shape, T v) {
        TensorT t = zeros(std::move(shape));
        for (auto& x : *t.data) x = v;
        return t;
    }

    static TensorT from(std::vector<int64_t> shape, std::vector<T> values) {
        if (numel_of(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("tensor: " + shape_str(shape) + " cannot hold " +
                             std::to_string(values.size()) + " values");
        TensorT t;
        t.shape = std::move(shape);
        t.data = std::make_shared<std::vector<T>>(std::move(values));
        return t;
    }

    static TensorT scalar(T v) { return from({1}, {v}); }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        return std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<int64_t>());
    }

    int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
    bool defined() const { return static_cast<bool>(data); }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t ndim() const { return shape.size(); }

    // Rows/cols of a matrix; a 1-D tensor counts as a single row.
    int64_t rows() const { return ndim() >= 2 ? shape[ndim() - 2] : 1; }
    int64_t cols() const { return shape.empty() ? 0 : shape[ndim() - 1]; }

    T* ptr() { return data->data(); }
    const T* ptr() const { return data->data(); }
    std::vector<T>& values() { return *data; }
    const std::vector<T>& values() const { return *data; }

    T item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape) + " is not scalar");
        return (*data)[0];
    }

    TensorT& set_requires_grad(bool on = true) {
        requires_grad = on;
        if (on && !grad) grad = std::make_shared<std::vector<T>>(data->size(), T(0));
        if (!on) grad.reset();
        return *this;
    }

    std::vector<T>& grad_ref() {
        if (!grad) throw std::logic_error("tensor has no gradient buffer");
        return *grad;
    }
    const std::vector<T>& grad_ref() const {
        if (!grad) throw std::logic_error("tensor has no gradient buffer");
        return *grad;
    }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), T(0));
    }

    // Deep copy of values only (fresh buffers, no grad).
    TensorT clone_detached() const {
        TensorT t;
        t.shape = shape;
        t.data = std::make_shared<std::vector<T>>(*data);
        return t;
    }
};

// Reverse-mode tape. Primitive ops append one backward closure per recorded
// node; closures run in reverse order, exactly once. A tape is single-use:
// a second backward() throws.
template <typename T>
class TapeT {
  public:
    void push(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    void backward(TensorT<T>& output, const TensorT<T>& seed) {
        if (consumed_) throw std::logic_error("backward: tape already consumed");
        if (!output.requires_grad)
            throw std::invalid_argument("backward: output does not require grad (nothing recorded)");
        if (seed.shape != output.shape)
            throw ShapeError("backward: seed shape " + shape_str(seed.shape) +
                             " does not match output shape " + shape_str(output.shape));
        auto& g = output.grad_ref();
        const auto& s = seed.values();
        for (size_t i = 0; i < g.size(); ++i) g[i] += s[i];
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        consumed_ = true;
    }

    // Scalar output convenience: seeds with 1.
    void backward(TensorT<T>& output) {
        backward(output, TensorT<T>::full(output.shape, T(1)));
    }

  private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace biascope
