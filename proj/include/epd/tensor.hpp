#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "epd/common.hpp"
#include "epd/rng.hpp"

namespace epd {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d <= 0) throw shape_error(strcat("non-positive extent in shape ", shape_str(s)));
        n *= d;
    }
    return n;
}

template <class T>
struct Node;  // autograd creator record, defined in autograd.hpp

// Dense row-major tensor. Copies are shallow: all copies (including reshaped
// views) share one Storage, so a gradient accumulated through any alias is
// seen by every alias. Ops always allocate fresh outputs; only the optimizer
// writes parameter values in place.
template <class T>
class Tensor {
    struct Storage {
        std::vector<T> values;
        std::vector<T> grad;  // empty until first use
    };

  public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        store_ = std::make_shared<Storage>();
        store_->values.assign(size_t(numel_of(shape_)), T(0));
    }

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
        int64_t n = numel_of(shape_);
        if (int64_t(values.size()) != n)
            throw shape_error(strcat("value count ", values.size(), " does not match shape ",
                                     shape_str(shape_)));
        store_ = std::make_shared<Storage>();
        store_->values = std::move(values);
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double std = 1.0) {
        Tensor t(std::move(shape));
        for (T& v : t.data()) v = T(rng.normal() * std);
        return t;
    }

    static Tensor rand_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
        Tensor t(std::move(shape));
        for (T& v : t.data()) v = T(rng.uniform(lo, hi));
        return t;
    }

    const Shape& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t numel() const { return store_ ? int64_t(store_->values.size()) : 0; }
    bool defined() const { return bool(store_); }

    std::vector<T>& data() { return store_->values; }
    const std::vector<T>& data() const { return store_->values; }
    T* ptr() { return store_->values.data(); }
    const T* ptr() const { return store_->values.data(); }

    T item() const {
        if (numel() != 1) throw contract_error(strcat("item() on tensor of shape ", shape_str(shape_)));
        return store_->values[0];
    }

    T& at(std::initializer_list<int64_t> idx) { return store_->values[flat_index(idx)]; }
    T at(std::initializer_list<int64_t> idx) const { return store_->values[flat_index(idx)]; }

    // View with identical element count; shares storage and graph state.
    Tensor reshaped(Shape s) const {
        if (numel_of(s) != numel())
            throw shape_error(strcat("reshape ", shape_str(shape_), " -> ", shape_str(s),
                                     " changes element count"));
        Tensor t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.store_ = std::make_shared<Storage>();
        t.store_->values = store_->values;
        return t;
    }

    bool all_finite() const {
        for (T v : store_->values)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    // --- autograd state (see autograd.hpp) ---
    bool requires_grad = false;
    std::shared_ptr<Node<T>> node;  // creator; null for leaves

    std::vector<T>& grad() {
        if (store_->grad.empty()) store_->grad.assign(store_->values.size(), T(0));
        return store_->grad;
    }
    const std::vector<T>& grad() const { return store_->grad; }
    bool has_grad() const { return store_ && !store_->grad.empty(); }
    void zero_grad() {
        if (store_ && !store_->grad.empty())
            std::fill(store_->grad.begin(), store_->grad.end(), T(0));
    }

    // Storage identity; used for graph bookkeeping.
    const void* buffer_id() const { return store_.get(); }

  private:
    size_t flat_index(std::initializer_list<int64_t> idx) const {
        if (idx.size() != shape_.size())
            throw shape_error(strcat("index rank ", idx.size(), " vs shape ", shape_str(shape_)));
        size_t flat = 0;
        size_t i = 0;
        for (int64_t v : idx) {
            flat = flat * size_t(shape_[i]) + size_t(v);
            ++i;
        }
        return flat;
    }

    Shape shape_;
    std::shared_ptr<Storage> store_;
};

template <class T>
uint64_t checksum(const Tensor<T>& t) {
    return fnv1a(t.ptr(), size_t(t.numel()) * sizeof(T));
}

}  // namespace epd
