#pragma once

// AdamW with decoupled weight decay and bias-corrected moments, plus the
// linear-warmup / cosine-decay learning-rate schedule.

#include <map>

#include "epd/archive.hpp"
#include "epd/autograd.hpp"

namespace epd {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double weight_decay = 0.05;
    double eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables gradient clipping
};

template <class T>
class AdamW {
  public:
    explicit AdamW(const AdamWConfig& cfg = {}) : cfg_(cfg) {}

    int64_t step_count() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }

    // One update over every parameter in the store. Every trainable parameter
    // must have a gradient.
    void step(ParamStore<T>& params, double lr) {
        for (auto& [name, p] : params.items())
            if (!p.has_grad())
                throw contract_error(strcat("adamw_step: parameter ", name, " has no gradient"));
        double clip_scale = 1.0;
        if (cfg_.clip_norm > 0.0) {
            double norm = params.grad_norm();
            if (norm > cfg_.clip_norm) clip_scale = cfg_.clip_norm / norm;
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (auto& [name, p] : params.items()) {
            Slot& slot = slots_[name];
            if (!slot.m.defined()) {
                slot.m = Tensor<T>(p.shape());
                slot.v = Tensor<T>(p.shape());
            }
            const int64_t n = p.numel();
            T* w = p.ptr();
            const T* g = p.grad().data();
            T* m = slot.m.ptr();
            T* v = slot.v.ptr();
            for (int64_t i = 0; i < n; ++i) {
                double gi = double(g[i]) * clip_scale;
                // decoupled decay before the moment update is applied
                double wi = double(w[i]) - lr * cfg_.weight_decay * double(w[i]);
                double mi = cfg_.beta1 * double(m[i]) + (1.0 - cfg_.beta1) * gi;
                double vi = cfg_.beta2 * double(v[i]) + (1.0 - cfg_.beta2) * gi * gi;
                m[i] = T(mi);
                v[i] = T(vi);
                w[i] = T(wi - lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps));
            }
        }
    }

    void save_into(Archive& a, const std::string& prefix = "optim") const {
        for (auto& [name, slot] : slots_) {
            a.put(strcat(prefix, ".", name, ".m"), slot.m);
            a.put(strcat(prefix, ".", name, ".v"), slot.v);
        }
        a.meta()[prefix + ".step"] = std::to_string(step_);
    }

    void load_from(const Archive& a, const ParamStore<T>& params,
                   const std::string& prefix = "optim") {
        slots_.clear();
        for (auto& [name, p] : params.items()) {
            std::string mk = strcat(prefix, ".", name, ".m");
            std::string vk = strcat(prefix, ".", name, ".v");
            if (!a.contains(mk)) continue;  // fresh parameter group
            Slot slot;
            slot.m = a.get<T>(mk);
            slot.v = a.get<T>(vk);
            if (slot.m.shape() != p.shape() || slot.v.shape() != p.shape())
                throw io_error(strcat("optimizer state for ", name, " has wrong shape"));
            slots_[name] = std::move(slot);
        }
        step_ = std::stoll(a.meta_or(prefix + ".step", "0"));
    }

  private:
    struct Slot {
        Tensor<T> m, v;
    };
    AdamWConfig cfg_;
    std::map<std::string, Slot> slots_;
    int64_t step_ = 0;
};

struct LRSchedule {
    double base_lr = 1e-3;
    double min_lr = 1e-6;
    int64_t warmup_steps = 0;
    int64_t total_steps = 1;
};

// Linear warmup from 0 to base_lr, then cosine decay to min_lr.
inline double lr_at(int64_t step, const LRSchedule& s) {
    if (step < 0 || s.total_steps < 1)
        throw contract_error(strcat("lr_at: step ", step, " of ", s.total_steps));
    if (step >= s.total_steps) return s.min_lr;
    if (s.warmup_steps > 0 && step < s.warmup_steps)
        return s.base_lr * double(step) / double(s.warmup_steps);
    const int64_t span = s.total_steps - s.warmup_steps;
    if (span <= 0) return s.base_lr;
    double progress = double(step - s.warmup_steps) / double(span);
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(ops::kPi * progress));
}

}  // namespace epd
