#pragma once

// Per-patch conditional diffusion: cosine schedule, forward noising, a small
// residual-MLP denoiser conditioned on the predictor latent z and a sinusoidal
// timestep embedding, the training loss, and an ancestral sampler for
// inspection. The loss is the per-patch squared error of predicted noise,
// summed over the patch dimension and averaged over patches; its gradient
// flows into z and the denoiser.

#include <functional>

#include "epd/autograd.hpp"
#include "epd/ops.hpp"

namespace epd {

struct DiffusionSchedule {
    int64_t timesteps = 1000;
    double s = 0.008;
    std::vector<double> alpha_bar;  // [T+1], alpha_bar[0] = 1
    std::vector<double> beta;       // [T+1], beta[0] unused, clipped to <= 0.999
};

// alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1+s)) * pi/2)
inline DiffusionSchedule cosine_schedule(int64_t timesteps = 1000, double s = 0.008) {
    if (timesteps < 1) throw config_error("cosine_schedule: need at least one timestep");
    if (!(s > 0)) throw config_error("cosine_schedule: offset s must be positive");
    DiffusionSchedule sched;
    sched.timesteps = timesteps;
    sched.s = s;
    sched.alpha_bar.resize(size_t(timesteps) + 1);
    sched.beta.assign(size_t(timesteps) + 1, 0.0);
    auto f = [&](double t) {
        double a = ((t / double(timesteps) + s) / (1.0 + s)) * (ops::kPi / 2.0);
        double c = std::cos(a);
        return c * c;
    };
    const double f0 = f(0.0);
    sched.alpha_bar[0] = 1.0;
    for (int64_t t = 1; t <= timesteps; ++t) {
        sched.alpha_bar[size_t(t)] = f(double(t)) / f0;
        sched.beta[size_t(t)] =
            std::min(1.0 - sched.alpha_bar[size_t(t)] / sched.alpha_bar[size_t(t - 1)], 0.999);
    }
    for (int64_t t = 1; t <= timesteps; ++t) {
        if (!(sched.alpha_bar[size_t(t)] < sched.alpha_bar[size_t(t - 1)]))
            throw contract_error(strcat("cosine_schedule: alpha_bar not strictly decreasing at t=",
                                        t));
        if (!(sched.alpha_bar[size_t(t)] > 0.0))
            throw contract_error("cosine_schedule: alpha_bar left (0,1]");
    }
    return sched;
}

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise, t per element
template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, const std::vector<int64_t>& t, const Tensor<T>& noise,
                   const DiffusionSchedule& sched) {
    ops::check_same_shape(x0.shape(), noise.shape(), "q_sample");
    const int64_t P = x0.shape().back();
    const int64_t rows = x0.numel() / P;
    if (int64_t(t.size()) != rows)
        throw contract_error(strcat("q_sample: ", t.size(), " timesteps for ", rows, " patches"));
    Tensor<T> out(x0.shape());
    for (int64_t r = 0; r < rows; ++r) {
        int64_t ti = t[size_t(r)];
        if (ti < 1 || ti > sched.timesteps)
            throw contract_error(strcat("q_sample: timestep ", ti, " outside [1,",
                                        sched.timesteps, "]"));
        T a = T(std::sqrt(sched.alpha_bar[size_t(ti)]));
        T b = T(std::sqrt(1.0 - sched.alpha_bar[size_t(ti)]));
        const T* xp = x0.ptr() + r * P;
        const T* np = noise.ptr() + r * P;
        T* op = out.ptr() + r * P;
        for (int64_t j = 0; j < P; ++j) op[j] = a * xp[j] + b * np[j];
    }
    return out;
}

// deterministic sinusoidal features; dim must be even
template <class T>
Tensor<T> timestep_embedding(const std::vector<int64_t>& t, int64_t dim) {
    if (dim < 2 || dim % 2 != 0)
        throw config_error(strcat("timestep_embedding: dim ", dim, " must be even"));
    const int64_t half = dim / 2;
    Tensor<T> out({int64_t(t.size()), dim});
    for (size_t r = 0; r < t.size(); ++r) {
        T* row = out.ptr() + int64_t(r) * dim;
        for (int64_t i = 0; i < half; ++i) {
            double freq = std::pow(10000.0, -double(i) / double(half));
            double a = double(t[r]) * freq;
            row[i] = T(std::sin(a));
            row[half + i] = T(std::cos(a));
        }
    }
    return out;
}

// Residual-MLP noise predictor. x_t enters through a width-W projection; the
// conditioning vector z and the timestep embedding are each projected to W
// once and added before every block's activation.
template <class T>
class DenoiserMLP {
  public:
    DenoiserMLP(int64_t patch_dim, int64_t cond_dim, int64_t depth, int64_t width,
                ParamStore<T>& ps, Rng& rng, const std::string& prefix = "denoiser")
        : patch_dim_(patch_dim), cond_dim_(cond_dim), depth_(depth), width_(width) {
        if (depth < 1 || width < 1) throw config_error("DenoiserMLP: depth and width must be >= 1");
        in_w_ = ps.add(prefix + ".in.weight", init_weight<T>({patch_dim, width}, rng));
        in_b_ = ps.add(prefix + ".in.bias", init_zeros<T>({width}));
        z_w_ = ps.add(prefix + ".cond_z.weight", init_weight<T>({cond_dim, width}, rng));
        z_b_ = ps.add(prefix + ".cond_z.bias", init_zeros<T>({width}));
        t_w_ = ps.add(prefix + ".cond_t.weight", init_weight<T>({temb_dim(), width}, rng));
        t_b_ = ps.add(prefix + ".cond_t.bias", init_zeros<T>({width}));
        for (int64_t i = 0; i < depth; ++i) {
            Block blk;
            blk.w1 = ps.add(strcat(prefix, ".block", i, ".fc1.weight"),
                            init_weight<T>({width, width}, rng));
            blk.b1 = ps.add(strcat(prefix, ".block", i, ".fc1.bias"), init_zeros<T>({width}));
            blk.w2 = ps.add(strcat(prefix, ".block", i, ".fc2.weight"),
                            init_weight<T>({width, width}, rng));
            blk.b2 = ps.add(strcat(prefix, ".block", i, ".fc2.bias"), init_zeros<T>({width}));
            blocks_.push_back(std::move(blk));
        }
        out_w_ = ps.add(prefix + ".out.weight", init_weight<T>({width, patch_dim}, rng));
        out_b_ = ps.add(prefix + ".out.bias", init_zeros<T>({patch_dim}));
    }

    static constexpr int64_t temb_dim() { return 64; }

    // x_t [M, P], t [M], z [M, cond_dim] -> predicted noise [M, P]
    Tensor<T> forward(const Tensor<T>& x_t, const std::vector<int64_t>& t,
                      const Tensor<T>& z) const {
        if (x_t.shape().back() != patch_dim_ || z.shape().back() != cond_dim_ ||
            x_t.numel() / patch_dim_ != z.numel() / cond_dim_)
            throw contract_error(strcat("DenoiserMLP: misaligned inputs x_t ",
                                        shape_str(x_t.shape()), " z ", shape_str(z.shape())));
        Tensor<T> temb = timestep_embedding<T>(t, temb_dim());
        const int64_t M = x_t.numel() / patch_dim_;
        Tensor<T> zc = ops::linear(z.reshaped({M, cond_dim_}), z_w_, z_b_);
        Tensor<T> tc = ops::linear(temb, t_w_, t_b_);
        Tensor<T> cond = ops::add(zc, tc);
        Tensor<T> h = ops::linear(x_t.reshaped({M, patch_dim_}), in_w_, in_b_);
        for (const auto& blk : blocks_) {
            auto u = ops::gelu(ops::add(ops::linear(h, blk.w1, blk.b1), cond));
            h = ops::add(h, ops::linear(u, blk.w2, blk.b2));
        }
        return ops::linear(h, out_w_, out_b_);
    }

    // adapter for the sampler
    std::function<Tensor<T>(const Tensor<T>&, const std::vector<int64_t>&, const Tensor<T>&)>
    as_fn() const {
        return [this](const Tensor<T>& x_t, const std::vector<int64_t>& t, const Tensor<T>& z) {
            return forward(x_t, t, z);
        };
    }

    int64_t patch_dim() const { return patch_dim_; }

  private:
    struct Block {
        Tensor<T> w1, b1, w2, b2;
    };
    int64_t patch_dim_, cond_dim_, depth_, width_;
    Tensor<T> in_w_, in_b_, z_w_, z_b_, t_w_, t_b_;
    std::vector<Block> blocks_;
    Tensor<T> out_w_, out_b_;
};

// Deterministic loss core: caller supplies the timestep draw and the noise, so
// the value is a pure function of (z, x, t, noise) and can be gradchecked and
// permutation-tested. Loss = mean over patches of ||eps_hat - eps||^2 (summed
// over the patch dimension). Any callable (x_t, t, z) -> eps_hat works as the
// denoiser.
template <class T, class DenoiserFn>
Tensor<T> diffusion_loss_core(const DenoiserFn& denoiser, const Tensor<T>& z, const Tensor<T>& x,
                              const std::vector<int64_t>& t, const Tensor<T>& noise,
                              const DiffusionSchedule& sched) {
    const int64_t P = x.shape().back();
    if (z.numel() / z.shape().back() != x.numel() / P)
        throw contract_error(strcat("diffusion_loss: z ", shape_str(z.shape()),
                                    " misaligned with x ", shape_str(x.shape())));
    Tensor<T> x_t = q_sample(x, t, noise, sched);
    Tensor<T> eps_hat = denoiser(x_t, t, z);
    return ops::scale(ops::mse_loss(eps_hat, noise.reshaped(eps_hat.shape())), T(P));
}

template <class T>
Tensor<T> diffusion_loss_core(const DenoiserMLP<T>& denoiser, const Tensor<T>& z,
                              const Tensor<T>& x, const std::vector<int64_t>& t,
                              const Tensor<T>& noise, const DiffusionSchedule& sched) {
    return diffusion_loss_core<T>(
        [&](const Tensor<T>& x_t, const std::vector<int64_t>& tv, const Tensor<T>& zz) {
            return denoiser.forward(x_t, tv, zz);
        },
        z, x, t, noise, sched);
}

// Training wrapper: t ~ Uniform{1..T} and eps ~ N(0, I) per masked patch.
template <class T>
Tensor<T> diffusion_loss(const DenoiserMLP<T>& denoiser, const Tensor<T>& z, const Tensor<T>& x,
                         const DiffusionSchedule& sched, Rng& rng) {
    const int64_t P = x.shape().back();
    const int64_t M = x.numel() / P;
    std::vector<int64_t> t(size_t(M), 0);
    for (int64_t r = 0; r < M; ++r) t[size_t(r)] = rng.uniform_int(1, sched.timesteps);
    Tensor<T> noise(x.shape());
    for (int64_t i = 0; i < noise.numel(); ++i) noise.ptr()[i] = T(rng.normal());
    return diffusion_loss_core(denoiser, z, x, t, noise, sched);
}

// Ancestral sampling from x_T ~ N(0, I) down to x_0. steps <= T; fewer steps
// stride the schedule. Inference-only (no graph). Shapes: z [M, cond], output
// [M, P].
template <class T>
Tensor<T> p_sample_loop(
    const std::function<Tensor<T>(const Tensor<T>&, const std::vector<int64_t>&, const Tensor<T>&)>&
        denoiser,
    const Tensor<T>& z, int64_t patch_dim, const DiffusionSchedule& sched, int64_t steps,
    Rng& rng) {
    if (steps < 1 || steps > sched.timesteps)
        throw contract_error(strcat("p_sample_loop: steps ", steps, " outside [1,",
                                    sched.timesteps, "]"));
    NoGradGuard ng;
    const int64_t M = z.numel() / z.shape().back();
    std::vector<int64_t> tau(size_t(steps), 0);
    for (int64_t i = 1; i <= steps; ++i) tau[size_t(i - 1)] = i * sched.timesteps / steps;

    Tensor<T> x({M, patch_dim});
    for (int64_t i = 0; i < x.numel(); ++i) x.ptr()[i] = T(rng.normal());

    for (int64_t i = steps; i >= 1; --i) {
        const int64_t t = tau[size_t(i - 1)];
        const int64_t t_prev = (i > 1) ? tau[size_t(i - 2)] : 0;
        const double ab_t = sched.alpha_bar[size_t(t)];
        const double ab_prev = sched.alpha_bar[size_t(t_prev)];
        const double beta_t = std::min(1.0 - ab_t / ab_prev, 0.999);
        const double alpha_t = 1.0 - beta_t;
        std::vector<int64_t> t_vec(size_t(M), t);
        Tensor<T> eps = denoiser(x, t_vec, z);
        const double inv_sqrt_ab = 1.0 / std::sqrt(ab_t);
        const double noise_coef = std::sqrt(1.0 - ab_t);
        const double c0 = std::sqrt(ab_prev) * beta_t / (1.0 - ab_t);
        const double c1 = std::sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t);
        const double sigma = (i > 1)
                                 ? std::sqrt(beta_t * (1.0 - ab_prev) / (1.0 - ab_t))
                                 : 0.0;
        for (int64_t j = 0; j < x.numel(); ++j) {
            double x0_hat = (double(x.ptr()[j]) - noise_coef * double(eps.ptr()[j])) * inv_sqrt_ab;
            double mu = c0 * x0_hat + c1 * double(x.ptr()[j]);
            x.ptr()[j] = T(mu + (sigma > 0 ? sigma * rng.normal() : 0.0));
        }
    }
    return x;
}

}  // namespace epd
