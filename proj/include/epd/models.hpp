#pragma once

// The Encoder / Predictor / Decoder triplet plus the alignment projection
// head. Parameters are registered in a ParamStore under dotted names
// (encoder.block0.attn.q.weight, ...); model structs hold aliases of the same
// storage, so checkpoint loads and optimizer steps are visible everywhere.

#include <optional>
#include <string>

#include "epd/masking.hpp"
#include "epd/ops.hpp"

namespace epd {

struct AttentionConfig {
    int64_t model_dim = 64;
    int64_t heads = 4;

    int64_t head_dim() const { return model_dim / heads; }
    void validate() const {
        if (model_dim < 1 || heads < 1 || model_dim % heads != 0)
            throw config_error(strcat("attention config: dim ", model_dim,
                                      " not divisible by heads ", heads));
    }
};

struct EncoderConfig {
    int64_t dim = 64, depth = 4, heads = 4;
    int64_t mlp_ratio = 4;
    int64_t patch_t = 1, patch = 4;
    int64_t channels = 3, frames = 8, height = 32, width = 32;

    TokenGrid grid() const {
        return TokenGrid{frames / patch_t, height / patch, width / patch};
    }
    int64_t tokens() const { return grid().tokens(); }
    int64_t patch_dim() const { return channels * patch_t * patch * patch; }

    void validate() const {
        AttentionConfig{dim, heads}.validate();
        if (depth < 1) throw config_error("encoder depth must be >= 1");
        if (frames % patch_t || height % patch || width % patch)
            throw config_error("encoder input dims not divisible by patch sizes");
    }
};

struct PredictorConfig {
    int64_t dim = 64, depth = 2, heads = 2;
    int64_t mlp_ratio = 4;

    void validate() const {
        AttentionConfig{dim, heads}.validate();
        if (depth < 1) throw config_error("predictor depth must be >= 1");
    }
};

enum class PredictMode { latents_at_masked, latents_all };

// Pre-norm transformer block: x += attn(ln(x)); x += mlp(ln(x))
template <class T>
struct TransformerBlock {
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
    ops::AttentionParams<T> attn;
    Tensor<T> w1, b1, w2, b2;
    int64_t heads = 1;

    static TransformerBlock init(ParamStore<T>& ps, const std::string& prefix, int64_t dim,
                                 int64_t hidden, int64_t heads, Rng& rng) {
        TransformerBlock blk;
        blk.heads = heads;
        blk.ln1_g = ps.add(prefix + ".ln1.gamma", init_ones<T>({dim}));
        blk.ln1_b = ps.add(prefix + ".ln1.beta", init_zeros<T>({dim}));
        blk.attn.wq = ps.add(prefix + ".attn.q.weight", init_weight<T>({dim, dim}, rng));
        blk.attn.bq = ps.add(prefix + ".attn.q.bias", init_zeros<T>({dim}));
        blk.attn.wkv = ps.add(prefix + ".attn.kv.weight", init_weight<T>({dim, 2 * dim}, rng));
        blk.attn.bkv = ps.add(prefix + ".attn.kv.bias", init_zeros<T>({2 * dim}));
        blk.attn.wo = ps.add(prefix + ".attn.out.weight", init_weight<T>({dim, dim}, rng));
        blk.attn.bo = ps.add(prefix + ".attn.out.bias", init_zeros<T>({dim}));
        blk.ln2_g = ps.add(prefix + ".ln2.gamma", init_ones<T>({dim}));
        blk.ln2_b = ps.add(prefix + ".ln2.beta", init_zeros<T>({dim}));
        blk.w1 = ps.add(prefix + ".mlp.fc1.weight", init_weight<T>({dim, hidden}, rng));
        blk.b1 = ps.add(prefix + ".mlp.fc1.bias", init_zeros<T>({hidden}));
        blk.w2 = ps.add(prefix + ".mlp.fc2.weight", init_weight<T>({hidden, dim}, rng));
        blk.b2 = ps.add(prefix + ".mlp.fc2.bias", init_zeros<T>({dim}));
        return blk;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        auto h = ops::add(x, ops::mhsa(ops::layer_norm(x, ln1_g, ln1_b), attn, heads));
        return ops::add(h, ops::mlp_block(ops::layer_norm(h, ln2_g, ln2_b), w1, b1, w2, b2));
    }
};

template <class T>
class Encoder {
  public:
    Encoder(const EncoderConfig& cfg, ParamStore<T>& ps, Rng& rng, const std::string& prefix = "encoder")
        : cfg_(cfg) {
        cfg.validate();
        embed_w_ = ps.add(prefix + ".embed.weight", init_weight<T>({cfg.patch_dim(), cfg.dim}, rng));
        embed_b_ = ps.add(prefix + ".embed.bias", init_zeros<T>({cfg.dim}));
        for (int64_t i = 0; i < cfg.depth; ++i)
            blocks_.push_back(TransformerBlock<T>::init(ps, strcat(prefix, ".block", i), cfg.dim,
                                                        cfg.mlp_ratio * cfg.dim, cfg.heads, rng));
        ln_g_ = ps.add(prefix + ".ln.gamma", init_ones<T>({cfg.dim}));
        ln_b_ = ps.add(prefix + ".ln.beta", init_zeros<T>({cfg.dim}));
        auto g = cfg.grid();
        positions_ = ops::sincos_positions<T>(g.t, g.h, g.w, cfg.dim);
    }

    // tokens [B, Nv, P] with their grid positions; Nv may be the full N
    Tensor<T> encode(const Tensor<T>& tokens, const std::vector<int64_t>& positions) const {
        if (tokens.rank() != 3 || tokens.dim(2) != cfg_.patch_dim())
            throw shape_error(strcat("encode: want [B,Nv,", cfg_.patch_dim(), "], got ",
                                     shape_str(tokens.shape())));
        if (int64_t(positions.size()) != tokens.dim(1))
            throw shape_error(strcat("encode: ", positions.size(), " positions for ",
                                     tokens.dim(1), " tokens"));
        Tensor<T> pos({int64_t(positions.size()), cfg_.dim});
        for (size_t i = 0; i < positions.size(); ++i) {
            int64_t p = positions[i];
            if (p < 0 || p >= cfg_.tokens())
                throw contract_error(strcat("encode: position ", p, " outside token grid"));
            std::memcpy(pos.ptr() + int64_t(i) * cfg_.dim, positions_.ptr() + p * cfg_.dim,
                        size_t(cfg_.dim) * sizeof(T));
        }
        Tensor<T> x = ops::add_broadcast_rows(ops::linear(tokens, embed_w_, embed_b_), pos);
        for (const auto& blk : blocks_) x = blk.forward(x);
        return ops::layer_norm(x, ln_g_, ln_b_);
    }

    // full (unmasked) sequence
    Tensor<T> encode_full(const Tensor<T>& tokens) const {
        std::vector<int64_t> all(size_t(cfg_.tokens()));
        for (size_t i = 0; i < all.size(); ++i) all[i] = int64_t(i);
        return encode(tokens, all);
    }

    const EncoderConfig& config() const { return cfg_; }

  private:
    EncoderConfig cfg_;
    Tensor<T> embed_w_, embed_b_;
    std::vector<TransformerBlock<T>> blocks_;
    Tensor<T> ln_g_, ln_b_;
    Tensor<T> positions_;
};

template <class T>
class Predictor {
  public:
    Predictor(const PredictorConfig& cfg, int64_t encoder_dim, const TokenGrid& grid,
              ParamStore<T>& ps, Rng& rng, const std::string& prefix = "predictor")
        : cfg_(cfg), encoder_dim_(encoder_dim), grid_(grid) {
        cfg.validate();
        if (cfg.dim != encoder_dim) {
            adapter_w_ = ps.add(prefix + ".adapter.weight",
                                init_weight<T>({encoder_dim, cfg.dim}, rng));
            adapter_b_ = ps.add(prefix + ".adapter.bias", init_zeros<T>({cfg.dim}));
        }
        mask_token_ = ps.add(prefix + ".mask_token", init_weight<T>({cfg.dim}, rng));
        for (int64_t i = 0; i < cfg.depth; ++i)
            blocks_.push_back(TransformerBlock<T>::init(ps, strcat(prefix, ".block", i), cfg.dim,
                                                        cfg.mlp_ratio * cfg.dim, cfg.heads, rng));
        ln_g_ = ps.add(prefix + ".ln.gamma", init_ones<T>({cfg.dim}));
        ln_b_ = ps.add(prefix + ".ln.beta", init_zeros<T>({cfg.dim}));
        positions_ = ops::sincos_positions<T>(grid.t, grid.h, grid.w, cfg.dim);
    }

    // Assembles visible latents + positional mask tokens over the full grid,
    // runs the predictor stack, and returns latents at the masked positions
    // (or at every position). With no masked positions in masked mode the
    // result is an undefined tensor.
    Tensor<T> predict(const Tensor<T>& enc_out, const std::vector<int64_t>& visible_idx,
                      const std::vector<int64_t>& masked_idx, PredictMode mode) const {
        if (enc_out.rank() != 3 || enc_out.dim(2) != encoder_dim_)
            throw shape_error(strcat("predict: want [B,Nv,", encoder_dim_, "], got ",
                                     shape_str(enc_out.shape())));
        if (mode == PredictMode::latents_at_masked && masked_idx.empty()) return {};
        const int64_t N = grid_.tokens();
        Tensor<T> x = enc_out;
        if (adapter_w_.defined()) x = ops::linear(x, adapter_w_, adapter_b_);
        Tensor<T> assembled = ops::assemble_tokens(x, visible_idx, mask_token_, masked_idx, N);
        // positional signal for the inserted mask tokens
        Tensor<T> pos({N, cfg_.dim});
        for (int64_t j : masked_idx)
            std::memcpy(pos.ptr() + j * cfg_.dim, positions_.ptr() + j * cfg_.dim,
                        size_t(cfg_.dim) * sizeof(T));
        Tensor<T> h = ops::add_broadcast_rows(assembled, pos);
        for (const auto& blk : blocks_) h = blk.forward(h);
        h = ops::layer_norm(h, ln_g_, ln_b_);
        if (mode == PredictMode::latents_all) return h;
        return ops::gather_rows(h, masked_idx);
    }

    const PredictorConfig& config() const { return cfg_; }
    int64_t depth() const { return cfg_.depth; }

  private:
    PredictorConfig cfg_;
    int64_t encoder_dim_;
    TokenGrid grid_;
    Tensor<T> adapter_w_, adapter_b_;
    Tensor<T> mask_token_;
    std::vector<TransformerBlock<T>> blocks_;
    Tensor<T> ln_g_, ln_b_;
    Tensor<T> positions_;
};

// --- pixel decoders ---

struct DecoderConfig {
    enum class Kind { linear, mlp, diff_mlp };
    Kind kind = Kind::diff_mlp;
    int64_t depth = 3;    // DiffMLP residual blocks
    int64_t width = 128;  // DiffMLP width

    void validate() const {
        if (kind == Kind::diff_mlp && (depth < 1 || width < 1))
            throw config_error("DiffMLP decoder needs depth >= 1 and width >= 1");
    }
};

// single affine map from predictor latents to pixel-patch space
template <class T>
class LinearHead {
  public:
    LinearHead(int64_t in_dim, int64_t patch_dim, ParamStore<T>& ps, Rng& rng,
               const std::string& prefix = "decoder")
        : w_(ps.add(prefix + ".linear.weight", init_weight<T>({in_dim, patch_dim}, rng))),
          b_(ps.add(prefix + ".linear.bias", init_zeros<T>({patch_dim}))) {}

    Tensor<T> decode(const Tensor<T>& z) const { return ops::linear(z, w_, b_); }

  private:
    Tensor<T> w_, b_;
};

// three linear layers with gelu in between
template <class T>
class MlpHead {
  public:
    MlpHead(int64_t in_dim, int64_t patch_dim, ParamStore<T>& ps, Rng& rng,
            const std::string& prefix = "decoder")
        : w1_(ps.add(prefix + ".fc1.weight", init_weight<T>({in_dim, in_dim}, rng))),
          b1_(ps.add(prefix + ".fc1.bias", init_zeros<T>({in_dim}))),
          w2_(ps.add(prefix + ".fc2.weight", init_weight<T>({in_dim, in_dim}, rng))),
          b2_(ps.add(prefix + ".fc2.bias", init_zeros<T>({in_dim}))),
          w3_(ps.add(prefix + ".fc3.weight", init_weight<T>({in_dim, patch_dim}, rng))),
          b3_(ps.add(prefix + ".fc3.bias", init_zeros<T>({patch_dim}))) {}

    Tensor<T> decode(const Tensor<T>& z) const {
        auto h = ops::gelu(ops::linear(z, w1_, b1_));
        h = ops::gelu(ops::linear(h, w2_, b2_));
        return ops::linear(h, w3_, b3_);
    }

  private:
    Tensor<T> w1_, b1_, w2_, b2_, w3_, b3_;
};

// --- alignment projection head: K sequential (LN -> linear) blocks ---

template <class T>
class ProjectionHead {
  public:
    ProjectionHead(int64_t in_dim, int64_t teacher_dim, int64_t layers, ParamStore<T>& ps,
                   Rng& rng, const std::string& prefix = "projection")
        : teacher_dim_(teacher_dim) {
        if (layers < 1) throw config_error("projection head needs K >= 1 blocks");
        for (int64_t i = 0; i < layers; ++i) {
            Block blk;
            int64_t out = (i == layers - 1) ? teacher_dim : in_dim;
            blk.ln_g = ps.add(strcat(prefix, ".block", i, ".ln.gamma"), init_ones<T>({in_dim}));
            blk.ln_b = ps.add(strcat(prefix, ".block", i, ".ln.beta"), init_zeros<T>({in_dim}));
            blk.w = ps.add(strcat(prefix, ".block", i, ".linear.weight"),
                           init_weight<T>({in_dim, out}, rng));
            blk.b = ps.add(strcat(prefix, ".block", i, ".linear.bias"), init_zeros<T>({out}));
            blocks_.push_back(std::move(blk));
        }
    }

    Tensor<T> project(const Tensor<T>& enc_out) const {
        Tensor<T> h = enc_out;
        for (const auto& blk : blocks_)
            h = ops::linear(ops::layer_norm(h, blk.ln_g, blk.ln_b), blk.w, blk.b);
        return h;
    }

    int64_t teacher_dim() const { return teacher_dim_; }

  private:
    struct Block {
        Tensor<T> ln_g, ln_b, w, b;
    };
    std::vector<Block> blocks_;
    int64_t teacher_dim_;
};

// --- predictor initialization ---

struct PredictorInit {
    enum class Mode { random, external };
    Mode mode = Mode::random;
    std::string archive_path;  // donor stack with blocks named layers.<i>.<param>
    int64_t layers = 0;        // how many trailing donor layers to take (0 = predictor depth)
};

namespace detail {
inline int64_t donor_depth(const Archive& a) {
    int64_t depth = 0;
    for (const auto& name : a.names()) {
        if (name.rfind("layers.", 0) != 0) continue;
        size_t dot = name.find('.', 7);
        depth = std::max(depth, int64_t(std::stoll(name.substr(7, dot - 7))) + 1);
    }
    return depth;
}
}  // namespace detail

// Copies the last-k donor layers onto predictor blocks 0..k-1. All names and
// shapes are validated before any parameter is written. Returns a provenance
// string recorded in checkpoints.
template <class T>
std::string load_predictor_init(ParamStore<T>& ps, const PredictorConfig& cfg,
                                const PredictorInit& init,
                                const std::string& prefix = "predictor") {
    if (init.mode == PredictorInit::Mode::random) return "random";
    Archive donor = Archive::load(init.archive_path);
    const int64_t total = detail::donor_depth(donor);
    const int64_t take = init.layers > 0 ? init.layers : cfg.depth;
    if (take != cfg.depth)
        throw config_error(strcat("predictor init: requested ", take, " donor layers for a depth-",
                                  cfg.depth, " predictor"));
    if (total < take)
        throw io_error(strcat("predictor init: donor has ", total, " layers, need ", take));

    static const char* kBlockParams[] = {
        ".ln1.gamma",       ".ln1.beta",       ".attn.q.weight",  ".attn.q.bias",
        ".attn.kv.weight",  ".attn.kv.bias",   ".attn.out.weight", ".attn.out.bias",
        ".ln2.gamma",       ".ln2.beta",       ".mlp.fc1.weight", ".mlp.fc1.bias",
        ".mlp.fc2.weight",  ".mlp.fc2.bias",
    };
    // validate everything up front
    std::vector<std::string> missing;
    for (int64_t i = 0; i < take; ++i)
        for (const char* p : kBlockParams) {
            std::string src = strcat("layers.", total - take + i, p);
            std::string dst = strcat(prefix, ".block", i, p);
            if (!donor.contains(src)) {
                missing.push_back(src);
                continue;
            }
            if (donor.find(src).shape != ps.get(dst).shape())
                throw io_error(strcat("predictor init: ", src, " has shape ",
                                      shape_str(donor.find(src).shape), ", predictor expects ",
                                      shape_str(ps.get(dst).shape())));
        }
    if (!missing.empty()) {
        std::string list;
        for (auto& m : missing) list += " " + m;
        throw io_error(strcat("predictor init: donor archive missing entries:", list));
    }
    for (int64_t i = 0; i < take; ++i)
        for (const char* p : kBlockParams) {
            Tensor<T> src = donor.get<T>(strcat("layers.", total - take + i, p));
            Tensor<T>& dst = ps.get(strcat(prefix, ".block", i, p));
            dst.data() = src.data();
        }
    return strcat("external:", init.archive_path, ":last", take, "_of_", total);
}

}  // namespace epd
