#pragma once

// Frozen teachers. ToyTeacher is a seed-fixed frame-wise transformer standing
// in for a pretrained image-semantic encoder: it embeds every frame's patches
// independently and reports a per-token saliency equal to the attention mass
// each token receives in the last block (normalized to sum 1 per clip).
// FileTeacher serves precomputed embeddings from an archive, the substitution
// point for real teacher weights.

#include <memory>

#include "epd/archive.hpp"
#include "epd/masking.hpp"
#include "epd/models.hpp"
#include "epd/patch.hpp"

namespace epd {

template <class T>
struct TeacherOutput {
    Tensor<T> tokens;    // [B, N, d_teacher]
    Tensor<T> saliency;  // [B, N], sums to 1 per clip
};

template <class T>
class Teacher {
  public:
    virtual ~Teacher() = default;
    // pixels [B, C, T, H, W]; grid must match the student's patchification
    virtual TeacherOutput<T> embed(const Tensor<T>& pixels, const TokenGrid& grid) = 0;
    virtual int64_t dim() const = 0;
    virtual uint64_t state_checksum() const = 0;
};

struct ToyTeacherConfig {
    int64_t dim = 32, depth = 2, heads = 2;
    int64_t patch = 4;
    uint64_t seed = 7;
};

template <class T>
class ToyTeacher final : public Teacher<T> {
  public:
    explicit ToyTeacher(const ToyTeacherConfig& cfg) : cfg_(cfg), params_(/*trainable=*/false) {
        AttentionConfig{cfg.dim, cfg.heads}.validate();
        if (cfg.depth < 1) throw config_error("ToyTeacher: depth must be >= 1");
        Rng rng(cfg.seed, "toy_teacher_init");
        const int64_t pdim = 3 * cfg.patch * cfg.patch;
        embed_w_ = params_.add("embed.weight", init_weight<T>({pdim, cfg.dim}, rng));
        embed_b_ = params_.add("embed.bias", init_zeros<T>({cfg.dim}));
        for (int64_t i = 0; i < cfg.depth; ++i)
            blocks_.push_back(TransformerBlock<T>::init(params_, strcat("block", i), cfg.dim,
                                                        4 * cfg.dim, cfg.heads, rng));
        ln_g_ = params_.add("ln.gamma", init_ones<T>({cfg.dim}));
        ln_b_ = params_.add("ln.beta", init_zeros<T>({cfg.dim}));
    }

    TeacherOutput<T> embed(const Tensor<T>& pixels, const TokenGrid& grid) override {
        NoGradGuard ng;
        if (pixels.rank() != 5)
            throw shape_error(strcat("teacher: want [B,C,T,H,W], got ", shape_str(pixels.shape())));
        auto g = patchify(pixels, /*pt=*/1, cfg_.patch);
        if (g.gt != grid.t || g.gh != grid.h || g.gw != grid.w)
            throw config_error(strcat("teacher grid ", g.gt, "x", g.gh, "x", g.gw,
                                      " does not match student grid ", grid.t, "x", grid.h, "x",
                                      grid.w));
        const int64_t B = pixels.dim(0), frames = g.gt, hw = g.gh * g.gw, N = g.num_tokens();

        // frame-wise: fold frames into the batch axis
        Tensor<T> x = ops::linear(g.tokens.reshaped({B * frames, hw, g.patch_dim()}), embed_w_,
                                  embed_b_);
        Tensor<T> pos = ops::sincos_positions<T>(1, g.gh, g.gw, cfg_.dim);
        x = ops::add_broadcast_rows(x, pos);

        Tensor<T> probs;  // last block's attention, [B*frames, heads, hw, hw]
        for (size_t i = 0; i < blocks_.size(); ++i) {
            const auto& blk = blocks_[i];
            Tensor<T> h = ops::layer_norm(x, blk.ln1_g, blk.ln1_b);
            Tensor<T> attn_out;
            if (i + 1 == blocks_.size())
                attn_out = attention_with_probs(h, blk, probs);
            else
                attn_out = ops::mhsa(h, blk.attn, cfg_.heads);
            x = ops::add(x, attn_out);
            x = ops::add(x, ops::mlp_block(ops::layer_norm(x, blk.ln2_g, blk.ln2_b), blk.w1,
                                           blk.b1, blk.w2, blk.b2));
        }
        TeacherOutput<T> out;
        out.tokens = ops::layer_norm(x, ln_g_, ln_b_).reshaped({B, N, cfg_.dim});

        // saliency: mean attention mass received per token, normalized per clip
        out.saliency = Tensor<T>({B, N});
        const int64_t H = cfg_.heads;
        for (int64_t b = 0; b < B; ++b) {
            T total = 0;
            for (int64_t f = 0; f < frames; ++f) {
                const T* base = probs.ptr() + ((b * frames + f) * H) * hw * hw;
                for (int64_t k = 0; k < hw; ++k) {
                    T acc = 0;
                    for (int64_t h = 0; h < H; ++h)
                        for (int64_t q = 0; q < hw; ++q) acc += base[(h * hw + q) * hw + k];
                    T v = acc / T(H * hw);
                    out.saliency.ptr()[b * N + f * hw + k] = v;
                    total += v;
                }
            }
            T inv = T(1) / total;
            for (int64_t n = 0; n < N; ++n) out.saliency.ptr()[b * N + n] *= inv;
        }
        return out;
    }

    int64_t dim() const override { return cfg_.dim; }
    uint64_t state_checksum() const override { return params_.state_checksum(); }
    const ParamStore<T>& params() const { return params_; }

  private:
    // same computation as ops::mhsa but keeps the attention probabilities
    Tensor<T> attention_with_probs(const Tensor<T>& x, const TransformerBlock<T>& blk,
                                   Tensor<T>& probs_out) const {
        const int64_t B = x.dim(0), N = x.dim(1), d = cfg_.dim, H = cfg_.heads, dh = d / H;
        Tensor<T> q = ops::linear(x, blk.attn.wq, blk.attn.bq);
        Tensor<T> kv = ops::linear(x, blk.attn.wkv, blk.attn.bkv);
        probs_out = Tensor<T>({B, H, N, N});
        Tensor<T> attn({B, N, d});
        const T alpha = T(1) / std::sqrt(T(dh));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < H; ++h) {
                T* P = probs_out.ptr() + ((b * H + h) * N) * N;
                gemm<T>(false, true, N, N, dh, alpha, q.ptr() + b * N * d + h * dh, d,
                        kv.ptr() + b * N * 2 * d + h * dh, 2 * d, T(0), P, N);
                ops::detail::softmax_rows_inplace(P, N, N);
                gemm<T>(false, false, N, dh, N, T(1), P, N,
                        kv.ptr() + b * N * 2 * d + d + h * dh, 2 * d, T(0),
                        attn.ptr() + b * N * d + h * dh, d);
            }
        return ops::linear(attn, blk.attn.wo, blk.attn.bo);
    }

    ToyTeacherConfig cfg_;
    ParamStore<T> params_;
    Tensor<T> embed_w_, embed_b_;
    std::vector<TransformerBlock<T>> blocks_;
    Tensor<T> ln_g_, ln_b_;
};

// Precomputed TeacherOutput loaded from the clip binary format. Serves the
// same tensors for every batch of the matching shape.
template <class T>
class FileTeacher final : public Teacher<T> {
  public:
    explicit FileTeacher(const std::string& path) : path_(path) {
        Archive a = Archive::load(path);
        out_.tokens = a.get<T>("tokens");
        out_.saliency = a.get<T>("saliency");
        if (out_.tokens.rank() != 3 || out_.saliency.rank() != 2 ||
            out_.tokens.dim(0) != out_.saliency.dim(0) ||
            out_.tokens.dim(1) != out_.saliency.dim(1))
            throw format_error(strcat(path, ": teacher file needs tokens [B,N,d] + saliency [B,N]"));
    }

    TeacherOutput<T> embed(const Tensor<T>& pixels, const TokenGrid& grid) override {
        if (pixels.dim(0) != out_.tokens.dim(0) || grid.tokens() != out_.tokens.dim(1))
            throw config_error(strcat(path_, ": precomputed teacher covers batch ",
                                      out_.tokens.dim(0), " x ", out_.tokens.dim(1),
                                      " tokens, requested ", pixels.dim(0), " x ",
                                      grid.tokens()));
        return out_;
    }

    int64_t dim() const override { return out_.tokens.dim(2); }
    uint64_t state_checksum() const override {
        return checksum(out_.tokens) ^ checksum(out_.saliency);
    }

    static void write(const TeacherOutput<T>& out, const std::string& path) {
        Archive a;
        a.put("tokens", out.tokens);
        a.put("saliency", out.saliency);
        a.meta()["kind"] = "teacher_output";
        a.save(path);
    }

  private:
    std::string path_;
    TeacherOutput<T> out_;
};

}  // namespace epd
