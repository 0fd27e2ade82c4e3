#pragma once

// Declarative run configuration: one JSON file fully determines a run.
// Unknown keys are rejected; the canonical dump's hash is stamped into every
// artifact a run emits.

#include <fstream>
#include <set>

#include <json.hpp>

#include "epd/losses.hpp"
#include "epd/models.hpp"
#include "epd/optim.hpp"
#include "epd/synth.hpp"
#include "epd/teacher.hpp"

namespace epd {

struct RunConfig {
    SynthConfig data;
    int64_t patch_t = 1, patch = 4;

    EncoderConfig encoder;      // input dims filled from data in finalize()
    PredictorConfig predictor;
    PredictorInit predictor_init;
    DecoderConfig decoder;
    int64_t projection_layers = 1;

    std::string teacher_kind = "toy";  // toy | file
    ToyTeacherConfig teacher;
    std::string teacher_file;

    std::string mask_strategy = "semantic";  // semantic | tube | multi_block
    double mask_ratio = 0.8;
    bool semantic_mask_top = true;  // polarity: mask the highest-saliency tokens
    BlockMaskConfig block;

    Stage1Weights stage1_weights;
    std::string stage2_distance = "mse";
    std::string stage2_target = "frozen";  // frozen | ema | file
    std::string stage2_target_file;
    double ema_momentum = 0.9998;
    bool stage2_zero_init_predictor = false;
    bool stage2_pixel_loss = false;
    bool stage2_unmasked_align = false;

    int64_t diffusion_timesteps = 1000;
    double diffusion_s = 0.008;

    double lr = 1e-3;
    AdamWConfig adamw;

    int64_t warmup_epochs = 1, total_epochs = 5, steps_per_epoch = 100;
    double min_lr = 1e-6;

    int64_t steps = 500;
    uint64_t seed = 0;
    bool log_timing = false;
    int64_t save_every = 0;
    bool overfit_single_batch = false;
    int64_t nan_inject_step = -1;  // test hook: forces a NaN loss at this step

    void finalize() {
        encoder.patch_t = patch_t;
        encoder.patch = patch;
        encoder.channels = 3;
        encoder.frames = data.frames;
        encoder.height = data.height;
        encoder.width = data.width;
        data.validate();
        encoder.validate();
        predictor.validate();
        decoder.validate();
        if (teacher_kind != "toy" && teacher_kind != "file")
            throw config_error(strcat("teacher.kind '", teacher_kind, "' (toy | file)"));
        if (teacher_kind == "toy") teacher.patch = patch;
        if (mask_strategy != "semantic" && mask_strategy != "tube" &&
            mask_strategy != "multi_block")
            throw config_error(strcat("masking.strategy '", mask_strategy,
                                      "' (semantic | tube | multi_block)"));
        if (!(mask_ratio > 0 && mask_ratio < 1))
            throw config_error(strcat("masking.ratio ", mask_ratio, " outside (0,1)"));
        latent_distance_from_string(stage2_distance);
        if (stage2_target != "frozen" && stage2_target != "ema" && stage2_target != "file")
            throw config_error(strcat("objective.stage2_target '", stage2_target,
                                      "' (frozen | ema | file)"));
        if (warmup_epochs < 0 || total_epochs < 1 || steps_per_epoch < 1 ||
            warmup_epochs > total_epochs)
            throw config_error("schedule: need 0 <= warmup_epochs <= total_epochs, steps_per_epoch >= 1");
        if (steps < 1) throw config_error("run.steps must be >= 1");
        if (steps > total_epochs * steps_per_epoch)
            throw config_error(strcat("run.steps ", steps, " exceed the schedule span ",
                                      total_epochs * steps_per_epoch));
    }

    TokenGrid grid() const { return encoder.grid(); }
    LRSchedule schedule() const {
        return LRSchedule{lr, min_lr, warmup_epochs * steps_per_epoch,
                          total_epochs * steps_per_epoch};
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["data"] = {{"batch", data.batch},       {"frames", data.frames},
                     {"height", data.height},     {"width", data.width},
                     {"min_shapes", data.min_shapes}, {"max_shapes", data.max_shapes},
                     {"min_speed", data.min_speed},   {"max_speed", data.max_speed},
                     {"depth_near", data.depth_near}, {"depth_far", data.depth_far},
                     {"shape_types", data.shape_types}, {"directions", data.directions}};
        j["patch"] = {{"t", patch_t}, {"spatial", patch}};
        j["encoder"] = {{"dim", encoder.dim},
                        {"depth", encoder.depth},
                        {"heads", encoder.heads},
                        {"mlp_ratio", encoder.mlp_ratio}};
        nlohmann::json pinit;
        pinit["mode"] = predictor_init.mode == PredictorInit::Mode::random ? "random" : "external";
        if (predictor_init.mode == PredictorInit::Mode::external) {
            pinit["archive"] = predictor_init.archive_path;
            pinit["layers"] = predictor_init.layers;
        }
        j["predictor"] = {{"dim", predictor.dim},
                          {"depth", predictor.depth},
                          {"heads", predictor.heads},
                          {"mlp_ratio", predictor.mlp_ratio},
                          {"init", pinit}};
        std::string kind = decoder.kind == DecoderConfig::Kind::linear
                               ? "linear"
                               : (decoder.kind == DecoderConfig::Kind::mlp ? "mlp" : "diff_mlp");
        j["decoder"] = {{"kind", kind}, {"depth", decoder.depth}, {"width", decoder.width}};
        j["projection"] = {{"layers", projection_layers}};
        if (teacher_kind == "toy")
            j["teacher"] = {{"kind", "toy"},
                            {"dim", teacher.dim},
                            {"depth", teacher.depth},
                            {"heads", teacher.heads},
                            {"seed", teacher.seed}};
        else
            j["teacher"] = {{"kind", "file"}, {"path", teacher_file}};
        j["masking"] = {{"strategy", mask_strategy},
                        {"ratio", mask_ratio},
                        {"mask_top", semantic_mask_top},
                        {"block",
                         {{"min_h", block.min_h},
                          {"max_h", block.max_h},
                          {"min_w", block.min_w},
                          {"max_w", block.max_w}}}};
        j["objective"] = {{"recon_weight", stage1_weights.recon},
                          {"sem_weight", stage1_weights.sem},
                          {"stage2_distance", stage2_distance},
                          {"stage2_target", stage2_target},
                          {"stage2_target_file", stage2_target_file},
                          {"ema_momentum", ema_momentum},
                          {"zero_init_predictor", stage2_zero_init_predictor},
                          {"pixel_loss", stage2_pixel_loss},
                          {"unmasked_align", stage2_unmasked_align}};
        j["diffusion"] = {{"timesteps", diffusion_timesteps}, {"s", diffusion_s}};
        j["optim"] = {{"lr", lr},
                      {"beta1", adamw.beta1},
                      {"beta2", adamw.beta2},
                      {"weight_decay", adamw.weight_decay},
                      {"eps", adamw.eps},
                      {"clip_norm", adamw.clip_norm}};
        j["schedule"] = {{"warmup_epochs", warmup_epochs},
                         {"total_epochs", total_epochs},
                         {"steps_per_epoch", steps_per_epoch},
                         {"min_lr", min_lr}};
        j["run"] = {{"steps", steps},
                    {"seed", seed},
                    {"log_timing", log_timing},
                    {"save_every", save_every},
                    {"overfit_single_batch", overfit_single_batch}};
        return j;
    }

    std::string canonical_json() const { return to_json().dump(); }
    std::string hash() const { return hex64(fnv1a(canonical_json())); }

    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw config_error(strcat("cannot open config file ", path));
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(f);
        } catch (const nlohmann::json::exception& e) {
            throw config_error(strcat(path, ": ", e.what()));
        }
        return from_json(j);
    }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
    if (!j.is_object()) throw config_error(strcat("config section '", where, "' must be an object"));
    for (auto& [k, v] : j.items())
        if (!allowed.count(k))
            throw config_error(strcat("unknown config key '", where, ".", k, "'"));
}

template <class V>
void read(const nlohmann::json& j, const char* key, V& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
        throw config_error(strcat("config key '", key, "': ", e.what()));
    }
}

}  // namespace detail

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
    using detail::read;
    using detail::reject_unknown;
    RunConfig c;
    reject_unknown(j, {"data", "patch", "encoder", "predictor", "decoder", "projection",
                       "teacher", "masking", "objective", "diffusion", "optim", "schedule",
                       "run"},
                   "<root>");
    if (j.contains("data")) {
        auto& d = j.at("data");
        reject_unknown(d, {"batch", "frames", "height", "width", "min_shapes", "max_shapes",
                           "min_speed", "max_speed", "depth_near", "depth_far", "shape_types",
                           "directions"},
                       "data");
        read(d, "batch", c.data.batch);
        read(d, "frames", c.data.frames);
        read(d, "height", c.data.height);
        read(d, "width", c.data.width);
        read(d, "min_shapes", c.data.min_shapes);
        read(d, "max_shapes", c.data.max_shapes);
        read(d, "min_speed", c.data.min_speed);
        read(d, "max_speed", c.data.max_speed);
        read(d, "depth_near", c.data.depth_near);
        read(d, "depth_far", c.data.depth_far);
        read(d, "shape_types", c.data.shape_types);
        read(d, "directions", c.data.directions);
    }
    if (j.contains("patch")) {
        reject_unknown(j.at("patch"), {"t", "spatial"}, "patch");
        read(j.at("patch"), "t", c.patch_t);
        read(j.at("patch"), "spatial", c.patch);
    }
    if (j.contains("encoder")) {
        reject_unknown(j.at("encoder"), {"dim", "depth", "heads", "mlp_ratio"}, "encoder");
        read(j.at("encoder"), "dim", c.encoder.dim);
        read(j.at("encoder"), "depth", c.encoder.depth);
        read(j.at("encoder"), "heads", c.encoder.heads);
        read(j.at("encoder"), "mlp_ratio", c.encoder.mlp_ratio);
    }
    if (j.contains("predictor")) {
        auto& p = j.at("predictor");
        reject_unknown(p, {"dim", "depth", "heads", "mlp_ratio", "init"}, "predictor");
        read(p, "dim", c.predictor.dim);
        read(p, "depth", c.predictor.depth);
        read(p, "heads", c.predictor.heads);
        read(p, "mlp_ratio", c.predictor.mlp_ratio);
        if (p.contains("init")) {
            auto& i = p.at("init");
            reject_unknown(i, {"mode", "archive", "layers"}, "predictor.init");
            std::string mode = "random";
            read(i, "mode", mode);
            if (mode == "random")
                c.predictor_init.mode = PredictorInit::Mode::random;
            else if (mode == "external")
                c.predictor_init.mode = PredictorInit::Mode::external;
            else
                throw config_error(strcat("predictor.init.mode '", mode, "' (random | external)"));
            read(i, "archive", c.predictor_init.archive_path);
            read(i, "layers", c.predictor_init.layers);
        }
    }
    if (j.contains("decoder")) {
        auto& d = j.at("decoder");
        reject_unknown(d, {"kind", "depth", "width"}, "decoder");
        std::string kind = "diff_mlp";
        read(d, "kind", kind);
        if (kind == "linear")
            c.decoder.kind = DecoderConfig::Kind::linear;
        else if (kind == "mlp")
            c.decoder.kind = DecoderConfig::Kind::mlp;
        else if (kind == "diff_mlp")
            c.decoder.kind = DecoderConfig::Kind::diff_mlp;
        else
            throw config_error(strcat("decoder.kind '", kind, "' (linear | mlp | diff_mlp)"));
        read(d, "depth", c.decoder.depth);
        read(d, "width", c.decoder.width);
    }
    if (j.contains("projection")) {
        reject_unknown(j.at("projection"), {"layers"}, "projection");
        read(j.at("projection"), "layers", c.projection_layers);
    }
    if (j.contains("teacher")) {
        auto& t = j.at("teacher");
        reject_unknown(t, {"kind", "dim", "depth", "heads", "seed", "path"}, "teacher");
        read(t, "kind", c.teacher_kind);
        read(t, "dim", c.teacher.dim);
        read(t, "depth", c.teacher.depth);
        read(t, "heads", c.teacher.heads);
        read(t, "seed", c.teacher.seed);
        read(t, "path", c.teacher_file);
    }
    if (j.contains("masking")) {
        auto& m = j.at("masking");
        reject_unknown(m, {"strategy", "ratio", "mask_top", "block"}, "masking");
        read(m, "strategy", c.mask_strategy);
        read(m, "ratio", c.mask_ratio);
        read(m, "mask_top", c.semantic_mask_top);
        if (m.contains("block")) {
            reject_unknown(m.at("block"), {"min_h", "max_h", "min_w", "max_w"}, "masking.block");
            read(m.at("block"), "min_h", c.block.min_h);
            read(m.at("block"), "max_h", c.block.max_h);
            read(m.at("block"), "min_w", c.block.min_w);
            read(m.at("block"), "max_w", c.block.max_w);
        }
    }
    if (j.contains("objective")) {
        auto& o = j.at("objective");
        reject_unknown(o, {"recon_weight", "sem_weight", "stage2_distance", "stage2_target",
                           "stage2_target_file", "ema_momentum", "zero_init_predictor",
                           "pixel_loss", "unmasked_align"},
                       "objective");
        read(o, "recon_weight", c.stage1_weights.recon);
        read(o, "sem_weight", c.stage1_weights.sem);
        read(o, "stage2_distance", c.stage2_distance);
        read(o, "stage2_target", c.stage2_target);
        read(o, "stage2_target_file", c.stage2_target_file);
        read(o, "ema_momentum", c.ema_momentum);
        read(o, "zero_init_predictor", c.stage2_zero_init_predictor);
        read(o, "pixel_loss", c.stage2_pixel_loss);
        read(o, "unmasked_align", c.stage2_unmasked_align);
    }
    if (j.contains("diffusion")) {
        reject_unknown(j.at("diffusion"), {"timesteps", "s"}, "diffusion");
        read(j.at("diffusion"), "timesteps", c.diffusion_timesteps);
        read(j.at("diffusion"), "s", c.diffusion_s);
    }
    if (j.contains("optim")) {
        auto& o = j.at("optim");
        reject_unknown(o, {"lr", "beta1", "beta2", "weight_decay", "eps", "clip_norm"}, "optim");
        read(o, "lr", c.lr);
        read(o, "beta1", c.adamw.beta1);
        read(o, "beta2", c.adamw.beta2);
        read(o, "weight_decay", c.adamw.weight_decay);
        read(o, "eps", c.adamw.eps);
        read(o, "clip_norm", c.adamw.clip_norm);
    }
    if (j.contains("schedule")) {
        auto& s = j.at("schedule");
        reject_unknown(s, {"warmup_epochs", "total_epochs", "steps_per_epoch", "min_lr"},
                       "schedule");
        read(s, "warmup_epochs", c.warmup_epochs);
        read(s, "total_epochs", c.total_epochs);
        read(s, "steps_per_epoch", c.steps_per_epoch);
        read(s, "min_lr", c.min_lr);
    }
    if (j.contains("run")) {
        auto& r = j.at("run");
        reject_unknown(r, {"steps", "seed", "log_timing", "save_every", "overfit_single_batch",
                           "nan_inject_step"},
                       "run");
        read(r, "steps", c.steps);
        read(r, "seed", c.seed);
        read(r, "log_timing", c.log_timing);
        read(r, "save_every", c.save_every);
        read(r, "overfit_single_batch", c.overfit_single_batch);
        read(r, "nan_inject_step", c.nan_inject_step);
    }
    c.finalize();
    return c;
}

}  // namespace epd
