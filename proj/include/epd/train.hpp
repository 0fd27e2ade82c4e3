#pragma once

// Stage-1 (masked reconstruction + semantic alignment) and Stage-2 (frozen-
// teacher latent prediction) training loops. All randomness is derived from
// (seed, stream, step), so a run is a pure function of (config, seed) and a
// resumed run continues the exact same trajectory.

#include <chrono>
#include <memory>
#include <optional>

#include "epd/config.hpp"
#include "epd/diffusion.hpp"
#include "epd/losses.hpp"
#include "epd/optim.hpp"
#include "epd/patch.hpp"
#include "epd/teacher.hpp"

namespace epd {

struct train_abort : error {
    using error::error;
};

struct MetricsRecord {
    std::string stage;
    int64_t step = 0;
    double lr = 0;
    double loss_total = 0, loss_recon = 0, loss_sem = 0, loss_latent = 0;
    double grad_norm = 0;
    double seconds = 0;
    std::string event;  // nonempty for diagnostics (nan_abort)
};

inline std::string to_json_line(const MetricsRecord& r) {
    nlohmann::ordered_json j;
    j["stage"] = r.stage;
    j["step"] = r.step;
    if (!r.event.empty()) {
        j["event"] = r.event;
        return j.dump();
    }
    j["lr"] = r.lr;
    j["loss_total"] = r.loss_total;
    j["loss_recon"] = r.loss_recon;
    j["loss_sem"] = r.loss_sem;
    j["loss_latent"] = r.loss_latent;
    j["grad_norm"] = r.grad_norm;
    j["seconds"] = r.seconds;
    return j.dump();
}

using MetricsSink = std::function<void(const MetricsRecord&)>;

// derive a per-(purpose, step) seed from the run seed
inline uint64_t derive_seed(uint64_t seed, std::string_view purpose, int64_t step) {
    Rng r(seed, purpose);
    return r.fork(uint64_t(step)).next_u64();
}

inline std::vector<std::string> zero_grad_params(const ParamStore<float>& ps) {
    std::vector<std::string> out;
    for (auto& [name, p] : ps.items()) {
        bool nonzero = false;
        if (p.has_grad())
            for (float g : p.grad())
                if (g != 0.f) nonzero = true;
        if (!nonzero) out.push_back(name);
    }
    return out;
}

// --- checkpoint io -------------------------------------------------------

template <class T>
void save_params(Archive& a, const ParamStore<T>& ps, const std::string& prefix = "param") {
    for (auto& [name, p] : ps.items()) a.put(strcat(prefix, ".", name), p);
}

// Loads every store parameter whose name starts with `filter` from the
// archive; missing names are collected into one typed error.
template <class T>
void load_params(const Archive& a, ParamStore<T>& ps, const std::string& filter = "",
                 const std::string& prefix = "param") {
    std::vector<std::string> missing;
    for (auto& [name, p] : ps.items()) {
        if (name.rfind(filter, 0) != 0) continue;
        std::string key = strcat(prefix, ".", name);
        if (!a.contains(key)) {
            missing.push_back(key);
            continue;
        }
        if (a.find(key).shape != p.shape())
            throw io_error(strcat("checkpoint entry ", key, " has shape ",
                                  shape_str(a.find(key).shape), ", model expects ",
                                  shape_str(p.shape())));
    }
    if (!missing.empty()) {
        std::string list;
        for (auto& m : missing) list += " " + m;
        throw io_error(strcat("checkpoint is missing parameters:", list));
    }
    for (auto& [name, p] : ps.items()) {
        if (name.rfind(filter, 0) != 0) continue;
        Tensor<T> src = a.get<T>(strcat(prefix, ".", name));
        p.data() = src.data();
    }
}

// --- stage 1 --------------------------------------------------------------

template <class T = float>
class Stage1Engine {
  public:
    explicit Stage1Engine(const RunConfig& cfg)
        : cfg_(cfg), sched_(cosine_schedule(cfg.diffusion_timesteps, cfg.diffusion_s)) {
        Rng init(cfg.seed, "stage1_init");
        encoder_ = std::make_unique<Encoder<T>>(cfg_.encoder, params_, init);
        predictor_ = std::make_unique<Predictor<T>>(cfg_.predictor, cfg_.encoder.dim,
                                                    cfg_.grid(), params_, init);
        predictor_init_provenance_ =
            load_predictor_init<T>(params_, cfg_.predictor, cfg_.predictor_init);
        make_teacher();
        projection_ = std::make_unique<ProjectionHead<T>>(cfg_.encoder.dim, teacher_->dim(),
                                                          cfg_.projection_layers, params_, init);
        switch (cfg_.decoder.kind) {
            case DecoderConfig::Kind::linear:
                linear_head_ = std::make_unique<LinearHead<T>>(cfg_.predictor.dim,
                                                               cfg_.encoder.patch_dim(), params_,
                                                               init);
                break;
            case DecoderConfig::Kind::mlp:
                mlp_head_ = std::make_unique<MlpHead<T>>(cfg_.predictor.dim,
                                                         cfg_.encoder.patch_dim(), params_, init);
                break;
            case DecoderConfig::Kind::diff_mlp:
                denoiser_ = std::make_unique<DenoiserMLP<T>>(
                    cfg_.encoder.patch_dim(), cfg_.predictor.dim, cfg_.decoder.depth,
                    cfg_.decoder.width, params_, init, "denoiser");
                break;
        }
        optim_ = std::make_unique<AdamW<T>>(cfg_.adamw);
    }

    // Runs steps [start_step, cfg.steps); emits one record per step.
    void run(const MetricsSink& sink, int64_t start_step = 0) {
        for (int64_t step = start_step; step < cfg_.steps; ++step) sink(run_step(step));
    }

    MetricsRecord run_step(int64_t step) {
        auto t0 = std::chrono::steady_clock::now();
        const int64_t effective = cfg_.overfit_single_batch ? 0 : step;
        VideoBatch<T> batch =
            gen_moving_shapes<T>(cfg_.data, derive_seed(cfg_.seed, "data", effective));
        PatchGrid<T> g = patchify(batch.pixels, cfg_.patch_t, cfg_.patch);
        TeacherOutput<T> tout = teacher_->embed(batch.pixels, cfg_.grid());
        MaskSpec mask = build_mask(effective, tout);
        SplitResult<T> sp = split(g.tokens, mask);

        Tensor<T> enc_out = encoder_->encode(sp.visible, sp.visible_positions);
        Tensor<T> z =
            predictor_->predict(enc_out, sp.visible_positions, sp.masked_positions,
                                PredictMode::latents_at_masked);
        Tensor<T> x_masked = ops::gather_rows(g.tokens, sp.masked_positions);

        Tensor<T> recon;
        if (denoiser_) {
            Rng drng(derive_seed(cfg_.seed, "diffusion", step), "draw");
            recon = diffusion_loss(*denoiser_, z, x_masked, sched_, drng);
        } else if (linear_head_) {
            recon = ops::mse_loss(linear_head_->decode(z), x_masked);
        } else {
            recon = ops::mse_loss(mlp_head_->decode(z), x_masked);
        }
        Tensor<T> sem = semantic_alignment_loss(projection_->project(enc_out), tout.tokens,
                                                sp.visible_positions);
        Tensor<T> total = stage1_loss(recon, sem, cfg_.stage1_weights);
        if (step == cfg_.nan_inject_step)
            total = ops::scale(total, std::numeric_limits<T>::quiet_NaN());

        MetricsRecord rec;
        rec.stage = "stage1";
        rec.step = step;
        rec.lr = lr_at(step, cfg_.schedule());
        if (!std::isfinite(double(total.item()))) {
            rec.event = "nan_abort";
            pending_diagnostic_ = rec;
            throw train_abort(strcat("stage1: non-finite loss at step ", step));
        }
        rec.loss_total = double(total.item());
        rec.loss_recon = double(recon.item());
        rec.loss_sem = double(sem.item());

        params_.zero_grad();
        backward(total);
        rec.grad_norm = params_.grad_norm();
        optim_->step(params_, rec.lr);
        for (auto& [name, p] : params_.items())
            if (!p.all_finite())
                throw train_abort(strcat("stage1: parameter ", name, " non-finite after step ",
                                         step));
        if (cfg_.log_timing)
            rec.seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return rec;
    }

    void save(const std::string& path, int64_t next_step) const {
        Archive a;
        save_params(a, params_);
        optim_->save_into(a);
        a.meta()["stage"] = "stage1";
        a.meta()["step"] = std::to_string(next_step);
        a.meta()["seed"] = std::to_string(cfg_.seed);
        a.meta()["config_hash"] = cfg_.hash();
        a.meta()["config_json"] = cfg_.canonical_json();
        a.meta()["predictor_init"] = predictor_init_provenance_;
        a.save(path);
    }

    // returns the step to resume from
    int64_t load(const std::string& path) {
        Archive a = Archive::load(path);
        if (a.meta_or("config_hash", "") != cfg_.hash())
            throw io_error(strcat(path, ": checkpoint was produced by config ",
                                  a.meta_or("config_hash", "<none>"), ", this run is ",
                                  cfg_.hash()));
        load_params(a, params_);
        optim_->load_from(a, params_);
        return std::stoll(a.meta_or("step", "0"));
    }

    const RunConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    Encoder<T>& encoder() { return *encoder_; }
    Teacher<T>& teacher() { return *teacher_; }
    const std::optional<MetricsRecord>& pending_diagnostic() const { return pending_diagnostic_; }
    const std::string& predictor_init_provenance() const { return predictor_init_provenance_; }

    MaskSpec build_mask(int64_t step, const TeacherOutput<T>& tout) {
        if (cfg_.mask_strategy == "tube")
            return random_tube_mask(cfg_.grid(), cfg_.mask_ratio,
                                    derive_seed(cfg_.seed, "mask", step));
        if (cfg_.mask_strategy == "multi_block")
            return multi_block_mask(cfg_.grid(), cfg_.mask_ratio, cfg_.block,
                                    derive_seed(cfg_.seed, "mask", step));
        // semantic: batch-mean saliency, one mask shared by the whole batch
        const int64_t B = tout.saliency.dim(0), N = tout.saliency.dim(1);
        Tensor<T> mean({N});
        for (int64_t n = 0; n < N; ++n) {
            T acc = 0;
            for (int64_t b = 0; b < B; ++b) acc += tout.saliency.at({b, n});
            mean.ptr()[n] = cfg_.semantic_mask_top ? acc : -acc;
        }
        return semantic_topk_mask(mean, cfg_.mask_ratio);
    }

  private:
    void make_teacher() {
        if (cfg_.teacher_kind == "file")
            teacher_ = std::make_unique<FileTeacher<T>>(cfg_.teacher_file);
        else
            teacher_ = std::make_unique<ToyTeacher<T>>(cfg_.teacher);
    }

    RunConfig cfg_;
    DiffusionSchedule sched_;
    ParamStore<T> params_;
    std::unique_ptr<Encoder<T>> encoder_;
    std::unique_ptr<Predictor<T>> predictor_;
    std::unique_ptr<ProjectionHead<T>> projection_;
    std::unique_ptr<LinearHead<T>> linear_head_;
    std::unique_ptr<MlpHead<T>> mlp_head_;
    std::unique_ptr<DenoiserMLP<T>> denoiser_;
    std::unique_ptr<Teacher<T>> teacher_;
    std::unique_ptr<AdamW<T>> optim_;
    std::string predictor_init_provenance_;
    std::optional<MetricsRecord> pending_diagnostic_;
};

// --- stage 2 --------------------------------------------------------------

template <class T = float>
class Stage2Engine {
  public:
    Stage2Engine(const RunConfig& cfg, const std::string& init_ckpt_path)
        : cfg_(cfg), sched_(cosine_schedule(cfg.diffusion_timesteps, cfg.diffusion_s)),
          teacher_params_(/*trainable=*/false) {
        Archive init_ckpt = Archive::load(init_ckpt_path);
        Rng init(cfg.seed, "stage2_init");

        // student: encoder + predictor from the Stage-1 weights
        encoder_ = std::make_unique<Encoder<T>>(cfg_.encoder, params_, init);
        predictor_ = std::make_unique<Predictor<T>>(cfg_.predictor, cfg_.encoder.dim,
                                                    cfg_.grid(), params_, init);
        load_params(init_ckpt, params_, "encoder.");
        if (!cfg_.stage2_zero_init_predictor) load_params(init_ckpt, params_, "predictor.");

        // frozen target path: the Stage-1 encoder
        if (cfg_.stage2_target == "file") {
            file_target_ = std::make_unique<FileTeacher<T>>(cfg_.stage2_target_file);
            target_dim_ = file_target_->dim();
        } else {
            Rng tinit(cfg.seed, "stage2_teacher_init");
            teacher_encoder_ = std::make_unique<Encoder<T>>(cfg_.encoder, teacher_params_, tinit);
            load_params(init_ckpt, teacher_params_, "encoder.");
            target_dim_ = cfg_.encoder.dim;
        }
        if (cfg_.predictor.dim != target_dim_) {
            head_w_ = params_.add("stage2_head.weight",
                                  init_weight<T>({cfg_.predictor.dim, target_dim_}, init));
            head_b_ = params_.add("stage2_head.bias", init_zeros<T>({target_dim_}));
        }

        if (cfg_.stage2_pixel_loss) {
            if (cfg_.decoder.kind == DecoderConfig::Kind::diff_mlp) {
                denoiser_ = std::make_unique<DenoiserMLP<T>>(
                    cfg_.encoder.patch_dim(), cfg_.predictor.dim, cfg_.decoder.depth,
                    cfg_.decoder.width, params_, init, "denoiser");
                try {
                    load_params(init_ckpt, params_, "denoiser.");
                } catch (const io_error& e) {
                    throw config_error(strcat("stage-2 pixel loss requested but the Stage-1 "
                                              "checkpoint has no matching decoder: ",
                                              e.what()));
                }
            } else {
                linear_head_ = std::make_unique<LinearHead<T>>(
                    cfg_.predictor.dim, cfg_.encoder.patch_dim(), params_, init);
                try {
                    load_params(init_ckpt, params_, "decoder.");
                } catch (const io_error& e) {
                    throw config_error(strcat("stage-2 pixel loss requested but the Stage-1 "
                                              "checkpoint has no matching decoder: ",
                                              e.what()));
                }
            }
        }
        if (cfg_.stage2_unmasked_align) {
            align_teacher_ = std::make_unique<ToyTeacher<T>>(cfg_.teacher);
            projection_ = std::make_unique<ProjectionHead<T>>(
                cfg_.encoder.dim, align_teacher_->dim(), cfg_.projection_layers, params_, init);
            load_params(init_ckpt, params_, "projection.");
        }
        optim_ = std::make_unique<AdamW<T>>(cfg_.adamw);
        distance_ = latent_distance_from_string(cfg_.stage2_distance);
    }

    void run(const MetricsSink& sink, int64_t start_step = 0) {
        for (int64_t step = start_step; step < cfg_.steps; ++step) sink(run_step(step));
    }

    MetricsRecord run_step(int64_t step) {
        auto t0 = std::chrono::steady_clock::now();
        VideoBatch<T> batch =
            gen_moving_shapes<T>(cfg_.data, derive_seed(cfg_.seed, "data", step));
        PatchGrid<T> g = patchify(batch.pixels, cfg_.patch_t, cfg_.patch);
        MaskSpec mask = build_mask(step, batch);
        SplitResult<T> sp = split(g.tokens, mask);

        // target latents for the full video, no gradient
        Tensor<T> target_full;
        {
            NoGradGuard ng;
            if (file_target_)
                target_full = file_target_->embed(batch.pixels, cfg_.grid()).tokens;
            else
                target_full = teacher_encoder_->encode_full(g.tokens);
        }
        Tensor<T> target = ops::gather_rows(target_full, sp.masked_positions);

        Tensor<T> enc_out = encoder_->encode(sp.visible, sp.visible_positions);
        Tensor<T> z = predictor_->predict(enc_out, sp.visible_positions, sp.masked_positions,
                                          PredictMode::latents_at_masked);
        Tensor<T> pred = head_w_.defined() ? ops::linear(z, head_w_, head_b_) : z;
        Tensor<T> latent = latent_prediction_loss(pred, target, distance_);

        Tensor<T> total = latent;
        MetricsRecord rec;
        rec.stage = "stage2";
        rec.step = step;
        rec.lr = lr_at(step, cfg_.schedule());
        rec.loss_latent = double(latent.item());
        if (denoiser_ || linear_head_) {
            Tensor<T> x_masked = ops::gather_rows(g.tokens, sp.masked_positions);
            Tensor<T> recon;
            if (denoiser_) {
                Rng drng(derive_seed(cfg_.seed, "diffusion", step), "draw");
                recon = diffusion_loss(*denoiser_, z, x_masked, sched_, drng);
            } else {
                recon = ops::mse_loss(linear_head_->decode(z), x_masked);
            }
            rec.loss_recon = double(recon.item());
            total = ops::add(total, recon);
        }
        if (projection_) {
            TeacherOutput<T> tout = align_teacher_->embed(batch.pixels, cfg_.grid());
            Tensor<T> sem = semantic_alignment_loss(projection_->project(enc_out), tout.tokens,
                                                    sp.visible_positions);
            rec.loss_sem = double(sem.item());
            total = ops::add(total, sem);
        }
        if (step == cfg_.nan_inject_step)
            total = ops::scale(total, std::numeric_limits<T>::quiet_NaN());
        if (!std::isfinite(double(total.item()))) {
            rec.event = "nan_abort";
            pending_diagnostic_ = rec;
            throw train_abort(strcat("stage2: non-finite loss at step ", step));
        }
        rec.loss_total = double(total.item());

        params_.zero_grad();
        backward(total);
        rec.grad_norm = params_.grad_norm();
        optim_->step(params_, rec.lr);
        if (cfg_.stage2_target == "ema") {
            const T m = T(cfg_.ema_momentum);
            for (auto& [name, tp] : teacher_params_.items()) {
                const Tensor<T>& spm = params_.get(name);
                T* t = tp.ptr();
                const T* s = spm.ptr();
                for (int64_t i = 0; i < tp.numel(); ++i) t[i] = m * t[i] + (T(1) - m) * s[i];
            }
        }
        if (cfg_.log_timing)
            rec.seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return rec;
    }

    MaskSpec build_mask(int64_t step, const VideoBatch<T>& batch) {
        if (cfg_.mask_strategy == "multi_block")
            return multi_block_mask(cfg_.grid(), cfg_.mask_ratio, cfg_.block,
                                    derive_seed(cfg_.seed, "mask", step));
        if (cfg_.mask_strategy == "tube")
            return random_tube_mask(cfg_.grid(), cfg_.mask_ratio,
                                    derive_seed(cfg_.seed, "mask", step));
        // semantic masking in stage 2 needs a saliency source
        if (!align_teacher_) align_teacher_ = std::make_unique<ToyTeacher<T>>(cfg_.teacher);
        TeacherOutput<T> tout = align_teacher_->embed(batch.pixels, cfg_.grid());
        const int64_t B = tout.saliency.dim(0), N = tout.saliency.dim(1);
        Tensor<T> mean({N});
        for (int64_t n = 0; n < N; ++n) {
            T acc = 0;
            for (int64_t b = 0; b < B; ++b) acc += tout.saliency.at({b, n});
            mean.ptr()[n] = cfg_.semantic_mask_top ? acc : -acc;
        }
        return semantic_topk_mask(mean, cfg_.mask_ratio);
    }

    void save(const std::string& path, int64_t next_step) const {
        Archive a;
        save_params(a, params_);
        if (!file_target_) save_params(a, teacher_params_, "teacher_param");
        optim_->save_into(a);
        a.meta()["stage"] = "stage2";
        a.meta()["step"] = std::to_string(next_step);
        a.meta()["seed"] = std::to_string(cfg_.seed);
        a.meta()["config_hash"] = cfg_.hash();
        a.meta()["config_json"] = cfg_.canonical_json();
        a.save(path);
    }

    int64_t load(const std::string& path) {
        Archive a = Archive::load(path);
        if (a.meta_or("config_hash", "") != cfg_.hash())
            throw io_error(strcat(path, ": checkpoint was produced by config ",
                                  a.meta_or("config_hash", "<none>"), ", this run is ",
                                  cfg_.hash()));
        load_params(a, params_);
        if (!file_target_) load_params(a, teacher_params_, "", "teacher_param");
        optim_->load_from(a, params_);
        return std::stoll(a.meta_or("step", "0"));
    }

    uint64_t teacher_checksum() const {
        return file_target_ ? file_target_->state_checksum() : teacher_params_.state_checksum();
    }

    // frozen-path target latents for a full token sequence
    Tensor<T> target_latents(const Tensor<T>& tokens) {
        NoGradGuard ng;
        if (!teacher_encoder_) throw contract_error("target_latents: no frozen teacher encoder");
        return teacher_encoder_->encode_full(tokens);
    }

    const RunConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    ParamStore<T>& teacher_params() { return teacher_params_; }
    Encoder<T>& encoder() { return *encoder_; }
    const std::optional<MetricsRecord>& pending_diagnostic() const { return pending_diagnostic_; }

  private:
    RunConfig cfg_;
    DiffusionSchedule sched_;
    ParamStore<T> params_;
    ParamStore<T> teacher_params_;
    std::unique_ptr<Encoder<T>> encoder_;
    std::unique_ptr<Predictor<T>> predictor_;
    std::unique_ptr<Encoder<T>> teacher_encoder_;
    std::unique_ptr<FileTeacher<T>> file_target_;
    std::unique_ptr<ToyTeacher<T>> align_teacher_;
    std::unique_ptr<ProjectionHead<T>> projection_;
    std::unique_ptr<DenoiserMLP<T>> denoiser_;
    std::unique_ptr<LinearHead<T>> linear_head_;
    Tensor<T> head_w_, head_b_;
    std::unique_ptr<AdamW<T>> optim_;
    LatentDistance distance_ = LatentDistance::mse;
    int64_t target_dim_ = 0;
    std::optional<MetricsRecord> pending_diagnostic_;
};

}  // namespace epd
