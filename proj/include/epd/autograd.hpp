#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "epd/tensor.hpp"

namespace epd {

// Reverse-mode tape. Each op that participates in differentiation attaches a
// Node to its output holding the parent tensors and a pull-back closure that
// adds into the parents' grad buffers.
template <class T>
struct Node {
    std::string op;
    std::vector<Tensor<T>> parents;
    // backward(output) must accumulate (+=) into parents' grad buffers.
    std::function<void(Tensor<T>&)> backward;
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

// RAII switch that disables graph construction (teacher forwards, eval).
struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <class T>
bool track_grad(const Tensor<T>& t) {
    return grad_enabled() && t.requires_grad;
}

template <class T, class... Ts>
bool track_grad(const Tensor<T>& t, const Ts&... rest) {
    return track_grad(t) || track_grad(rest...);
}

// Attach a node to `out` if any input is tracked.
template <class T>
void attach(Tensor<T>& out, std::string op, std::vector<Tensor<T>> parents,
            std::function<void(Tensor<T>&)> backward) {
    bool tracked = false;
    if (grad_enabled())
        for (const auto& p : parents)
            if (p.requires_grad) tracked = true;
    if (!tracked) return;
    out.requires_grad = true;
    out.node = std::make_shared<Node<T>>(
        Node<T>{std::move(op), std::move(parents), std::move(backward)});
}

// Reverse-mode accumulation from a scalar loss. Grads accumulate additively
// across calls; zero them via ParamStore::zero_grad or Tensor::zero_grad.
template <class T>
void backward(Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw contract_error(strcat("backward requires a scalar loss, got shape ",
                                    shape_str(loss.shape())));
    if (!std::isfinite(double(loss.item())))
        throw contract_error("backward on non-finite loss");
    if (!loss.requires_grad) return;

    // Topological order over creator nodes (buffer identity keyed).
    std::vector<Tensor<T>> order;
    std::unordered_set<const void*> visited;
    std::vector<std::pair<Tensor<T>, size_t>> stack;  // (tensor, next parent index)
    stack.emplace_back(loss, 0);
    visited.insert(loss.buffer_id());
    while (!stack.empty()) {
        auto& [t, next] = stack.back();
        if (!t.node || next >= t.node->parents.size()) {
            order.push_back(t);
            stack.pop_back();
            continue;
        }
        Tensor<T> p = t.node->parents[next++];
        if (p.node && p.requires_grad && !visited.count(p.buffer_id())) {
            visited.insert(p.buffer_id());
            stack.emplace_back(p, 0);
        }
    }

    loss.grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (it->node && it->has_grad()) it->node->backward(*it);
    }
}

// Named leaf parameters of one model. Names are dotted paths, kept sorted so
// that checkpoints and optimizer traversal have a fixed order.
template <class T>
class ParamStore {
  public:
    explicit ParamStore(bool trainable = true) : trainable_(trainable) {}

    Tensor<T>& add(const std::string& name, Tensor<T> value) {
        if (params_.count(name)) throw contract_error(strcat("duplicate parameter name ", name));
        value.requires_grad = trainable_;
        auto [it, ok] = params_.emplace(name, std::move(value));
        (void)ok;
        return it->second;
    }

    Tensor<T>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw contract_error(strcat("unknown parameter ", name));
        return it->second;
    }
    const Tensor<T>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw contract_error(strcat("unknown parameter ", name));
        return it->second;
    }
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    std::map<std::string, Tensor<T>>& items() { return params_; }
    const std::map<std::string, Tensor<T>>& items() const { return params_; }
    size_t size() const { return params_.size(); }
    bool trainable() const { return trainable_; }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& [name, p] : params_) n += p.numel();
        return n;
    }

    double grad_norm() const {
        double sq = 0;
        for (const auto& [name, p] : params_)
            if (p.has_grad())
                for (T g : p.grad()) sq += double(g) * double(g);
        return std::sqrt(sq);
    }

    uint64_t state_checksum() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, p] : params_) {
            h = fnv1a(name, h);
            h = fnv1a(p.ptr(), size_t(p.numel()) * sizeof(T), h);
        }
        return h;
    }

  private:
    std::map<std::string, Tensor<T>> params_;
    bool trainable_;
};

// Standard init helpers (truncated normal 0.02 for weights, zeros for biases,
// ones/zeros for layer norm).
template <class T>
Tensor<T> init_weight(Shape shape, Rng& rng, double std = 0.02) {
    Tensor<T> t(std::move(shape));
    for (T& v : t.data()) v = T(rng.trunc_normal(std));
    return t;
}

template <class T>
Tensor<T> init_zeros(Shape shape) {
    return Tensor<T>(std::move(shape));
}

template <class T>
Tensor<T> init_ones(Shape shape) {
    return Tensor<T>::full(std::move(shape), T(1));
}

}  // namespace epd
