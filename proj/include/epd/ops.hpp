#pragma once

// Differentiable primitives. Forward allocates a fresh output; backward
// closures accumulate (+=) into parent grads. Attention and the structured
// losses are fused ops with hand-written pull-backs; every one of them is
// covered by the central finite-difference suite.

#include <cmath>
#include <cstring>

#include "epd/autograd.hpp"
#include "epd/gemm.hpp"
#include "epd/tensor.hpp"

namespace epd {
namespace ops {

constexpr double kPi = 3.14159265358979323846;

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw shape_error(strcat(op, ": shape mismatch ", shape_str(a), " vs ", shape_str(b)));
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
    attach<T>(out, "add", {a, b}, [n](Tensor<T>& o) {
        auto& pa = o.node->parents[0];
        auto& pb = o.node->parents[1];
        const T* g = o.grad().data();
        if (track_grad(pa)) {
            T* ga = pa.grad().data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (track_grad(pb)) {
            T* gb = pb.grad().data();
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
    attach<T>(out, "sub", {a, b}, [n](Tensor<T>& o) {
        auto& pa = o.node->parents[0];
        auto& pb = o.node->parents[1];
        const T* g = o.grad().data();
        if (track_grad(pa)) {
            T* ga = pa.grad().data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (track_grad(pb)) {
            T* gb = pb.grad().data();
            for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
    attach<T>(out, "mul", {a, b}, [n](Tensor<T>& o) {
        auto& pa = o.node->parents[0];
        auto& pb = o.node->parents[1];
        const T* g = o.grad().data();
        if (track_grad(pa)) {
            T* ga = pa.grad().data();
            const T* vb = pb.ptr();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
        }
        if (track_grad(pb)) {
            T* gb = pb.grad().data();
            const T* va = pa.ptr();
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * c;
    attach<T>(out, "scale", {a}, [n, c](Tensor<T>& o) {
        auto& pa = o.node->parents[0];
        if (!track_grad(pa)) return;
        const T* g = o.grad().data();
        T* ga = pa.grad().data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
    });
    return out;
}

template <class T>
Tensor<T> exp_op(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = std::exp(a.ptr()[i]);
    Tensor<T> saved = out;
    attach<T>(out, "exp", {a}, [n, saved](Tensor<T>& o) {
        auto& pa = o.node->parents[0];
        if (!track_grad(pa)) return;
        const T* g = o.grad().data();
        T* ga = pa.grad().data();
        const T* y = saved.ptr();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
    });
    return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = T(1) / (T(1) + std::exp(-a.ptr()[i]));
    Tensor<T> saved = out;
    attach<T>(out, "sigmoid", {a}, [n, saved](Tensor<T>& o) {
        auto& pa = o.node->parents[0];
        if (!track_grad(pa)) return;
        const T* g = o.grad().data();
        T* ga = pa.grad().data();
        const T* y = saved.ptr();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
    });
    return out;
}

// exact-erf GELU
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const int64_t n = out.numel();
    auto cdf = std::make_shared<std::vector<T>>(size_t(n));
    const T inv_sqrt2 = T(0.70710678118654752440);
    for (int64_t i = 0; i < n; ++i) {
        T x = a.ptr()[i];
        T c = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        (*cdf)[i] = c;
        out.ptr()[i] = x * c;
    }
    attach<T>(out, "gelu", {a}, [n, cdf](Tensor<T>& o) {
        auto& pa = o.node->parents[0];
        if (!track_grad(pa)) return;
        const T* g = o.grad().data();
        T* ga = pa.grad().data();
        const T* x = pa.ptr();
        const T inv_sqrt2pi = T(0.39894228040143267794);
        for (int64_t i = 0; i < n; ++i) {
            T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
            ga[i] += g[i] * ((*cdf)[i] + x[i] * pdf);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

// x [..., k] times w [k, n] -> [..., n]
template <class T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w) {
    if (w.rank() != 2) throw shape_error(strcat("matmul: weight must be rank 2, got ",
                                                shape_str(w.shape())));
    const int64_t k = w.dim(0), n = w.dim(1);
    if (x.rank() < 1 || x.shape().back() != k)
        throw shape_error(strcat("matmul: inner extents disagree, x ", shape_str(x.shape()),
                                 " vs w ", shape_str(w.shape())));
    const int64_t m = x.numel() / k;
    Shape out_shape = x.shape();
    out_shape.back() = n;
    Tensor<T> out(out_shape);
    matmul_raw<T>(false, false, m, n, k, x.ptr(), w.ptr(), out.ptr());
    attach<T>(out, "matmul", {x, w}, [m, n, k](Tensor<T>& o) {
        auto& px = o.node->parents[0];
        auto& pw = o.node->parents[1];
        const T* g = o.grad().data();
        if (track_grad(px))
            matmul_raw<T>(false, true, m, k, n, g, pw.ptr(), px.grad().data(), T(1), T(1));
        if (track_grad(pw))
            matmul_raw<T>(true, false, k, n, m, px.ptr(), g, pw.grad().data(), T(1), T(1));
    });
    return out;
}

// y = x·W + b with W [d_in, d_out], b [d_out]; one fused node
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (w.rank() != 2)
        throw shape_error(strcat("linear: weight must be rank 2, got ", shape_str(w.shape())));
    if (b.rank() != 1 || b.dim(0) != w.dim(1))
        throw shape_error(strcat("linear: bias ", shape_str(b.shape()), " vs weight ",
                                 shape_str(w.shape())));
    const int64_t k = w.dim(0), n = w.dim(1);
    if (x.rank() < 1 || x.shape().back() != k)
        throw shape_error(strcat("linear: inner extents disagree, x ", shape_str(x.shape()),
                                 " vs w ", shape_str(w.shape())));
    const int64_t m = x.numel() / k;
    Shape out_shape = x.shape();
    out_shape.back() = n;
    Tensor<T> out(out_shape);
    matmul_raw<T>(false, false, m, n, k, x.ptr(), w.ptr(), out.ptr());
    for (int64_t r = 0; r < m; ++r) {
        T* p = out.ptr() + r * n;
        const T* bp = b.ptr();
        for (int64_t j = 0; j < n; ++j) p[j] += bp[j];
    }
    attach<T>(out, "linear", {x, w, b}, [m, n, k](Tensor<T>& o) {
        auto& px = o.node->parents[0];
        auto& pw = o.node->parents[1];
        auto& pb = o.node->parents[2];
        const T* g = o.grad().data();
        if (track_grad(px))
            matmul_raw<T>(false, true, m, k, n, g, pw.ptr(), px.grad().data(), T(1), T(1));
        if (track_grad(pw))
            matmul_raw<T>(true, false, k, n, m, px.ptr(), g, pw.grad().data(), T(1), T(1));
        if (track_grad(pb)) {
            T* gb = pb.grad().data();
            for (int64_t r = 0; r < m; ++r)
                for (int64_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// normalization / softmax
// ---------------------------------------------------------------------------

// Per-last-axis standardization followed by affine. eps keeps degenerate rows
// finite (constant row -> zeros).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6)) {
    if (x.rank() < 1) throw shape_error("layer_norm: rank-0 input");
    const int64_t d = x.shape().back();
    if (d < 1) throw shape_error("layer_norm: empty last axis");
    if (gamma.numel() != d || beta.numel() != d)
        throw shape_error(strcat("layer_norm: affine params ", shape_str(gamma.shape()), "/",
                                 shape_str(beta.shape()), " vs feature dim ", d));
    const int64_t rows = x.numel() / d;
    Tensor<T> out(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(size_t(x.numel()));
    auto inv_std = std::make_shared<std::vector<T>>(size_t(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* xp = x.ptr() + r * d;
        T* op = out.ptr() + r * d;
        T* hp = xhat->data() + r * d;
        T mu = 0;
        for (int64_t j = 0; j < d; ++j) mu += xp[j];
        mu /= T(d);
        T var = 0;
        for (int64_t j = 0; j < d; ++j) {
            T c = xp[j] - mu;
            var += c * c;
        }
        var /= T(d);
        T inv = T(1) / std::sqrt(var + eps);
        (*inv_std)[size_t(r)] = inv;
        for (int64_t j = 0; j < d; ++j) {
            T h = (xp[j] - mu) * inv;
            hp[j] = h;
            op[j] = gamma.ptr()[j] * h + beta.ptr()[j];
        }
    }
    attach<T>(out, "layer_norm", {x, gamma, beta}, [rows, d, xhat, inv_std](Tensor<T>& o) {
        auto& px = o.node->parents[0];
        auto& pg = o.node->parents[1];
        auto& pb = o.node->parents[2];
        const T* g = o.grad().data();
        if (track_grad(pg)) {
            T* gg = pg.grad().data();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
        }
        if (track_grad(pb)) {
            T* gb = pb.grad().data();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (track_grad(px)) {
            T* gx = px.grad().data();
            const T* gam = pg.ptr();
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * d;
                const T* hr = xhat->data() + r * d;
                T inv = (*inv_std)[size_t(r)];
                T m1 = 0, m2 = 0;  // mean(dy*gamma), mean(dy*gamma*xhat)
                for (int64_t j = 0; j < d; ++j) {
                    T dh = gr[j] * gam[j];
                    m1 += dh;
                    m2 += dh * hr[j];
                }
                m1 /= T(d);
                m2 /= T(d);
                T* gxr = gx + r * d;
                for (int64_t j = 0; j < d; ++j) {
                    T dh = gr[j] * gam[j];
                    gxr[j] += inv * (dh - m1 - hr[j] * m2);
                }
            }
        }
    });
    return out;
}

// max-subtracted softmax along the last axis
template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    if (x.rank() < 1) throw shape_error("softmax: rank-0 input");
    const int64_t n = x.shape().back();
    const int64_t rows = x.numel() / n;
    Tensor<T> out(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const T* xp = x.ptr() + r * n;
        T* op = out.ptr() + r * n;
        T mx = xp[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xp[j]);
        T sum = 0;
        for (int64_t j = 0; j < n; ++j) {
            T e = std::exp(xp[j] - mx);
            op[j] = e;
            sum += e;
        }
        T inv = T(1) / sum;
        for (int64_t j = 0; j < n; ++j) op[j] *= inv;
    }
    Tensor<T> saved = out;
    attach<T>(out, "softmax", {x}, [rows, n, saved](Tensor<T>& o) {
        auto& px = o.node->parents[0];
        if (!track_grad(px)) return;
        const T* g = o.grad().data();
        const T* y = saved.ptr();
        T* gx = px.grad().data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* gr = g + r * n;
            const T* yr = y + r * n;
            T dot = 0;
            for (int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
            T* gxr = gx + r * n;
            for (int64_t j = 0; j < n; ++j) gxr[j] += yr[j] * (gr[j] - dot);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// attention cores
// ---------------------------------------------------------------------------

namespace detail {

// softmax over rows of a raw [rows, n] buffer (used inside fused attention)
template <class T>
void softmax_rows_inplace(T* p, int64_t rows, int64_t n) {
    for (int64_t r = 0; r < rows; ++r) {
        T* row = p + r * n;
        T mx = row[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (int64_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        T inv = T(1) / sum;
        for (int64_t j = 0; j < n; ++j) row[j] *= inv;
    }
}

// dS = P .* (dP - rowsum(dP .* P)), written into dp in place
template <class T>
void softmax_rows_backward_inplace(T* dp, const T* probs, int64_t rows, int64_t n) {
    for (int64_t r = 0; r < rows; ++r) {
        T* dr = dp + r * n;
        const T* pr = probs + r * n;
        T dot = 0;
        for (int64_t j = 0; j < n; ++j) dot += dr[j] * pr[j];
        for (int64_t j = 0; j < n; ++j) dr[j] = pr[j] * (dr[j] - dot);
    }
}

}  // namespace detail

// Fused scaled-dot-product attention over packed projections.
// q: [B, Nq, d]; kv: [B, Nk, 2d] laid out [k | v] on the last axis.
// Full (non-causal) attention; heads split d into d/heads slices.
template <class T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& kv, int64_t heads) {
    if (q.rank() != 3 || kv.rank() != 3)
        throw shape_error(strcat("attention_core: want rank-3 q/kv, got ", shape_str(q.shape()),
                                 " and ", shape_str(kv.shape())));
    const int64_t B = q.dim(0), Nq = q.dim(1), d = q.dim(2);
    const int64_t Nk = kv.dim(1);
    if (kv.dim(0) != B || kv.dim(2) != 2 * d)
        throw shape_error(strcat("attention_core: kv ", shape_str(kv.shape()),
                                 " incompatible with q ", shape_str(q.shape())));
    if (heads < 1 || d % heads != 0)
        throw config_error(strcat("attention_core: model dim ", d, " not divisible by heads ",
                                  heads));
    const int64_t dh = d / heads;
    const T alpha = T(1) / std::sqrt(T(dh));

    Tensor<T> out({B, Nq, d});
    auto probs = std::make_shared<std::vector<T>>(size_t(B * heads * Nq * Nk));
    for (int64_t b = 0; b < B; ++b) {
        const T* qb = q.ptr() + b * Nq * d;
        const T* kb = kv.ptr() + b * Nk * 2 * d;
        const T* vb = kb + d;
        T* ob = out.ptr() + b * Nq * d;
        for (int64_t h = 0; h < heads; ++h) {
            T* P = probs->data() + ((b * heads + h) * Nq) * Nk;
            // scores = alpha * Q_h K_h^T
            gemm<T>(false, true, Nq, Nk, dh, alpha, qb + h * dh, d, kb + h * dh, 2 * d, T(0), P,
                    Nk);
            detail::softmax_rows_inplace(P, Nq, Nk);
            // out_h = P V_h
            gemm<T>(false, false, Nq, dh, Nk, T(1), P, Nk, vb + h * dh, 2 * d, T(0), ob + h * dh,
                    d);
        }
    }
    attach<T>(out, "attention_core", {q, kv},
              [B, Nq, Nk, d, heads, dh, alpha, probs](Tensor<T>& o) {
                  auto& pq = o.node->parents[0];
                  auto& pkv = o.node->parents[1];
                  const bool want_q = track_grad(pq), want_kv = track_grad(pkv);
                  if (!want_q && !want_kv) return;
                  const T* g = o.grad().data();
                  T* gq = want_q ? pq.grad().data() : nullptr;
                  T* gkv = want_kv ? pkv.grad().data() : nullptr;
                  std::vector<T> dP(size_t(Nq * Nk));
                  for (int64_t b = 0; b < B; ++b) {
                      const T* qb = pq.ptr() + b * Nq * d;
                      const T* kb = pkv.ptr() + b * Nk * 2 * d;
                      const T* vb = kb + d;
                      const T* gb = g + b * Nq * d;
                      for (int64_t h = 0; h < heads; ++h) {
                          const T* P = probs->data() + ((b * heads + h) * Nq) * Nk;
                          if (want_kv) {
                              // dV += P^T dO_h
                              gemm<T>(true, false, Nk, dh, Nq, T(1), P, Nk, gb + h * dh, d, T(1),
                                      gkv + b * Nk * 2 * d + d + h * dh, 2 * d);
                          }
                          // dP = dO_h V_h^T, then dS in place
                          gemm<T>(false, true, Nq, Nk, dh, T(1), gb + h * dh, d, vb + h * dh,
                                  2 * d, T(0), dP.data(), Nk);
                          detail::softmax_rows_backward_inplace(dP.data(), P, Nq, Nk);
                          if (want_q) {
                              // dQ += alpha * dS K_h
                              gemm<T>(false, false, Nq, dh, Nk, alpha, dP.data(), Nk, kb + h * dh,
                                      2 * d, T(1), gq + b * Nq * d + h * dh, d);
                          }
                          if (want_kv) {
                              // dK += alpha * dS^T Q_h
                              gemm<T>(true, false, Nk, dh, Nq, alpha, dP.data(), Nk, qb + h * dh,
                                      d, T(1), gkv + b * Nk * 2 * d + h * dh, 2 * d);
                          }
                      }
                  }
              });
    return out;
}

// Parameter bundle for one attention block (packed kv projection).
template <class T>
struct AttentionParams {
    Tensor<T> wq, bq;    // [d, d], [d]
    Tensor<T> wkv, bkv;  // [d, 2d], [2d]
    Tensor<T> wo, bo;    // [d, d], [d]
};

// Full multi-head self-attention block: projections + fused core.
template <class T>
Tensor<T> mhsa(const Tensor<T>& x, const AttentionParams<T>& p, int64_t heads) {
    if (x.rank() != 3)
        throw shape_error(strcat("mhsa: want [B,N,d], got ", shape_str(x.shape())));
    Tensor<T> q = linear(x, p.wq, p.bq);
    Tensor<T> kv = linear(x, p.wkv, p.bkv);
    Tensor<T> attn = attention_core(q, kv, heads);
    return linear(attn, p.wo, p.bo);
}

// linear -> gelu -> linear; residual is the caller's business
template <class T>
Tensor<T> mlp_block(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1,
                    const Tensor<T>& w2, const Tensor<T>& b2) {
    if (w1.dim(1) < 1) throw config_error("mlp_block: empty hidden layer");
    return linear(gelu(linear(x, w1, b1)), w2, b2);
}

// Cross attention: queries attend over a separate context sequence.
template <class T>
Tensor<T> cross_attention(const Tensor<T>& queries, const Tensor<T>& context,
                          const AttentionParams<T>& p, int64_t heads) {
    if (queries.rank() != 3 || context.rank() != 3)
        throw shape_error(strcat("cross_attention: want rank-3 inputs, got ",
                                 shape_str(queries.shape()), " and ",
                                 shape_str(context.shape())));
    if (queries.dim(0) != context.dim(0) || queries.dim(2) != context.dim(2))
        throw shape_error(strcat("cross_attention: batch/model dims disagree, ",
                                 shape_str(queries.shape()), " vs ",
                                 shape_str(context.shape())));
    Tensor<T> q = linear(queries, p.wq, p.bq);
    Tensor<T> kv = linear(context, p.wkv, p.bkv);
    Tensor<T> attn = attention_core(q, kv, heads);
    return linear(attn, p.wo, p.bo);
}

// ---------------------------------------------------------------------------
// token (row) rearrangement
// ---------------------------------------------------------------------------

// x [B, N, D], idx over N (shared across the batch) -> [B, |idx|, D]
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int64_t>& idx) {
    if (x.rank() != 3)
        throw shape_error(strcat("gather_rows: want [B,N,D], got ", shape_str(x.shape())));
    const int64_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
    const int64_t m = int64_t(idx.size());
    if (m == 0) throw contract_error("gather_rows: empty index list");
    for (int64_t i : idx)
        if (i < 0 || i >= N) throw contract_error(strcat("gather_rows: index ", i, " out of [0,", N, ")"));
    Tensor<T> out({B, m, D});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < m; ++i)
            std::memcpy(out.ptr() + (b * m + i) * D, x.ptr() + (b * N + idx[size_t(i)]) * D,
                        size_t(D) * sizeof(T));
    attach<T>(out, "gather_rows", {x}, [B, N, D, m, idx](Tensor<T>& o) {
        auto& px = o.node->parents[0];
        if (!track_grad(px)) return;
        const T* g = o.grad().data();
        T* gx = px.grad().data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < m; ++i) {
                const T* src = g + (b * m + i) * D;
                T* dst = gx + (b * N + idx[size_t(i)]) * D;
                for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
            }
    });
    return out;
}

// Rebuild a full [B, N, D] sequence from visible rows plus a shared mask token
// broadcast into every masked slot.
template <class T>
Tensor<T> assemble_tokens(const Tensor<T>& visible, const std::vector<int64_t>& visible_idx,
                          const Tensor<T>& mask_token, const std::vector<int64_t>& masked_idx,
                          int64_t N) {
    if (visible.rank() != 3)
        throw shape_error(strcat("assemble_tokens: want [B,Nv,D], got ",
                                 shape_str(visible.shape())));
    const int64_t B = visible.dim(0), Nv = visible.dim(1), D = visible.dim(2);
    if (int64_t(visible_idx.size()) != Nv)
        throw contract_error(strcat("assemble_tokens: ", visible_idx.size(),
                                    " visible indices for ", Nv, " rows"));
    if (mask_token.numel() != D)
        throw shape_error(strcat("assemble_tokens: mask token ", shape_str(mask_token.shape()),
                                 " vs feature dim ", D));
    if (Nv + int64_t(masked_idx.size()) != N)
        throw contract_error(strcat("assemble_tokens: ", Nv, " visible + ", masked_idx.size(),
                                    " masked != ", N));
    std::vector<char> seen(size_t(N), 0);
    for (int64_t i : visible_idx) {
        if (i < 0 || i >= N || seen[size_t(i)])
            throw contract_error(strcat("assemble_tokens: bad/overlapping visible index ", i));
        seen[size_t(i)] = 1;
    }
    for (int64_t i : masked_idx) {
        if (i < 0 || i >= N || seen[size_t(i)])
            throw contract_error(strcat("assemble_tokens: bad/overlapping masked index ", i));
        seen[size_t(i)] = 1;
    }
    Tensor<T> out({B, N, D});
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t i = 0; i < Nv; ++i)
            std::memcpy(out.ptr() + (b * N + visible_idx[size_t(i)]) * D,
                        visible.ptr() + (b * Nv + i) * D, size_t(D) * sizeof(T));
        for (int64_t j : masked_idx)
            std::memcpy(out.ptr() + (b * N + j) * D, mask_token.ptr(), size_t(D) * sizeof(T));
    }
    attach<T>(out, "assemble_tokens", {visible, mask_token},
              [B, N, Nv, D, visible_idx, masked_idx](Tensor<T>& o) {
                  auto& pv = o.node->parents[0];
                  auto& pm = o.node->parents[1];
                  const T* g = o.grad().data();
                  if (track_grad(pv)) {
                      T* gv = pv.grad().data();
                      for (int64_t b = 0; b < B; ++b)
                          for (int64_t i = 0; i < Nv; ++i) {
                              const T* src = g + (b * N + visible_idx[size_t(i)]) * D;
                              T* dst = gv + (b * Nv + i) * D;
                              for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
                          }
                  }
                  if (track_grad(pm)) {
                      T* gm = pm.grad().data();
                      for (int64_t b = 0; b < B; ++b)
                          for (int64_t jidx : masked_idx) {
                              const T* src = g + (b * N + jidx) * D;
                              for (int64_t j = 0; j < D; ++j) gm[j] += src[j];
                          }
                  }
              });
    return out;
}

// x [..., N, D] + r [N, D] broadcast over leading dims
template <class T>
Tensor<T> add_broadcast_rows(const Tensor<T>& x, const Tensor<T>& r) {
    if (r.rank() != 2)
        throw shape_error(strcat("add_broadcast_rows: r must be [N,D], got ",
                                 shape_str(r.shape())));
    const int64_t block = r.numel();
    if (x.numel() % block != 0 || x.rank() < 2 ||
        x.shape()[x.rank() - 1] != r.dim(1) || x.shape()[x.rank() - 2] != r.dim(0))
        throw shape_error(strcat("add_broadcast_rows: x ", shape_str(x.shape()), " vs r ",
                                 shape_str(r.shape())));
    const int64_t reps = x.numel() / block;
    Tensor<T> out(x.shape());
    for (int64_t b = 0; b < reps; ++b) {
        const T* xp = x.ptr() + b * block;
        T* op = out.ptr() + b * block;
        const T* rp = r.ptr();
        for (int64_t i = 0; i < block; ++i) op[i] = xp[i] + rp[i];
    }
    attach<T>(out, "add_broadcast_rows", {x, r}, [reps, block](Tensor<T>& o) {
        auto& px = o.node->parents[0];
        auto& pr = o.node->parents[1];
        const T* g = o.grad().data();
        if (track_grad(px)) {
            T* gx = px.grad().data();
            for (int64_t i = 0; i < reps * block; ++i) gx[i] += g[i];
        }
        if (track_grad(pr)) {
            T* gr = pr.grad().data();
            for (int64_t b = 0; b < reps; ++b)
                for (int64_t i = 0; i < block; ++i) gr[i] += g[b * block + i];
        }
    });
    return out;
}

// q [Q, D] -> [B, Q, D] (learnable queries shared across the batch)
template <class T>
Tensor<T> expand_batch(const Tensor<T>& q, int64_t B) {
    if (q.rank() != 2)
        throw shape_error(strcat("expand_batch: want [Q,D], got ", shape_str(q.shape())));
    const int64_t block = q.numel();
    Tensor<T> out({B, q.dim(0), q.dim(1)});
    for (int64_t b = 0; b < B; ++b)
        std::memcpy(out.ptr() + b * block, q.ptr(), size_t(block) * sizeof(T));
    attach<T>(out, "expand_batch", {q}, [B, block](Tensor<T>& o) {
        auto& pq = o.node->parents[0];
        if (!track_grad(pq)) return;
        const T* g = o.grad().data();
        T* gq = pq.grad().data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < block; ++i) gq[i] += g[b * block + i];
    });
    return out;
}

// contiguous slice of the last axis
template <class T>
Tensor<T> slice_lastdim(const Tensor<T>& x, int64_t offset, int64_t len) {
    const int64_t D = x.shape().back();
    if (offset < 0 || len <= 0 || offset + len > D)
        throw shape_error(strcat("slice_lastdim: [", offset, ",", offset + len, ") out of dim ",
                                 D));
    const int64_t rows = x.numel() / D;
    Shape s = x.shape();
    s.back() = len;
    Tensor<T> out(s);
    for (int64_t r = 0; r < rows; ++r)
        std::memcpy(out.ptr() + r * len, x.ptr() + r * D + offset, size_t(len) * sizeof(T));
    attach<T>(out, "slice_lastdim", {x}, [rows, D, offset, len](Tensor<T>& o) {
        auto& px = o.node->parents[0];
        if (!track_grad(px)) return;
        const T* g = o.grad().data();
        T* gx = px.grad().data();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < len; ++j) gx[r * D + offset + j] += g[r * len + j];
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions & losses
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
    const int64_t n = x.numel();
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += x.ptr()[i];
    Tensor<T> out = Tensor<T>::scalar(acc / T(n));
    attach<T>(out, "mean_all", {x}, [n](Tensor<T>& o) {
        auto& px = o.node->parents[0];
        if (!track_grad(px)) return;
        T g = o.grad()[0] / T(n);
        T* gx = px.grad().data();
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
    return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    const int64_t n = x.numel();
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += x.ptr()[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    attach<T>(out, "sum_all", {x}, [n](Tensor<T>& o) {
        auto& px = o.node->parents[0];
        if (!track_grad(px)) return;
        T g = o.grad()[0];
        T* gx = px.grad().data();
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
    return out;
}

// mean over all elements of (a-b)^2
template <class T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a.shape(), b.shape(), "mse_loss");
    const int64_t n = a.numel();
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        T d = a.ptr()[i] - b.ptr()[i];
        acc += d * d;
    }
    Tensor<T> out = Tensor<T>::scalar(acc / T(n));
    attach<T>(out, "mse_loss", {a, b}, [n](Tensor<T>& o) {
        auto& pa = o.node->parents[0];
        auto& pb = o.node->parents[1];
        T g = o.grad()[0] * T(2) / T(n);
        if (track_grad(pa)) {
            T* ga = pa.grad().data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g * (pa.ptr()[i] - pb.ptr()[i]);
        }
        if (track_grad(pb)) {
            T* gb = pb.grad().data();
            for (int64_t i = 0; i < n; ++i) gb[i] -= g * (pa.ptr()[i] - pb.ptr()[i]);
        }
    });
    return out;
}

// mean |a-b|
template <class T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a.shape(), b.shape(), "l1_loss");
    const int64_t n = a.numel();
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += std::abs(a.ptr()[i] - b.ptr()[i]);
    Tensor<T> out = Tensor<T>::scalar(acc / T(n));
    attach<T>(out, "l1_loss", {a, b}, [n](Tensor<T>& o) {
        auto& pa = o.node->parents[0];
        auto& pb = o.node->parents[1];
        T g = o.grad()[0] / T(n);
        for (int64_t i = 0; i < n; ++i) {
            T d = pa.ptr()[i] - pb.ptr()[i];
            T s = d > 0 ? g : (d < 0 ? -g : T(0));
            if (track_grad(pa)) pa.grad()[size_t(i)] += s;
            if (track_grad(pb)) pb.grad()[size_t(i)] -= s;
        }
    });
    return out;
}

// mean over elements of smooth-L1 (Huber, transition at beta)
template <class T>
Tensor<T> smooth_l1_loss(const Tensor<T>& a, const Tensor<T>& b, T beta = T(1)) {
    check_same_shape(a.shape(), b.shape(), "smooth_l1_loss");
    const int64_t n = a.numel();
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        T d = std::abs(a.ptr()[i] - b.ptr()[i]);
        acc += d < beta ? T(0.5) * d * d / beta : d - T(0.5) * beta;
    }
    Tensor<T> out = Tensor<T>::scalar(acc / T(n));
    attach<T>(out, "smooth_l1_loss", {a, b}, [n, beta](Tensor<T>& o) {
        auto& pa = o.node->parents[0];
        auto& pb = o.node->parents[1];
        T g = o.grad()[0] / T(n);
        for (int64_t i = 0; i < n; ++i) {
            T d = pa.ptr()[i] - pb.ptr()[i];
            T s = std::abs(d) < beta ? g * d / beta : (d > 0 ? g : -g);
            if (track_grad(pa)) pa.grad()[size_t(i)] += s;
            if (track_grad(pb)) pb.grad()[size_t(i)] -= s;
        }
    });
    return out;
}

// loss = -mean over rows of cos(student_row, teacher_row); rows are the
// flattened leading dims. eps guards zero-norm rows.
template <class T>
Tensor<T> neg_mean_cosine(const Tensor<T>& student, const Tensor<T>& teacher, T eps = T(1e-8)) {
    check_same_shape(student.shape(), teacher.shape(), "neg_mean_cosine");
    const int64_t d = student.shape().back();
    const int64_t rows = student.numel() / d;
    T acc = 0;
    auto row_stats = std::make_shared<std::vector<T>>(size_t(rows) * 3);  // (dot, |s|, |t|)
    for (int64_t r = 0; r < rows; ++r) {
        const T* sp = student.ptr() + r * d;
        const T* tp = teacher.ptr() + r * d;
        T dot = 0, ss = 0, tt = 0;
        for (int64_t j = 0; j < d; ++j) {
            dot += sp[j] * tp[j];
            ss += sp[j] * sp[j];
            tt += tp[j] * tp[j];
        }
        T sn = std::sqrt(ss), tn = std::sqrt(tt);
        (*row_stats)[size_t(r) * 3] = dot;
        (*row_stats)[size_t(r) * 3 + 1] = sn;
        (*row_stats)[size_t(r) * 3 + 2] = tn;
        acc += dot / (sn * tn + eps);
    }
    Tensor<T> out = Tensor<T>::scalar(-acc / T(rows));
    attach<T>(out, "neg_mean_cosine", {student, teacher}, [rows, d, eps, row_stats](Tensor<T>& o) {
        auto& ps = o.node->parents[0];
        auto& pt = o.node->parents[1];
        if (!track_grad(ps) && !track_grad(pt)) return;
        T g = -o.grad()[0] / T(rows);
        for (int64_t r = 0; r < rows; ++r) {
            const T* sp = ps.ptr() + r * d;
            const T* tp = pt.ptr() + r * d;
            T dot = (*row_stats)[size_t(r) * 3];
            T sn = (*row_stats)[size_t(r) * 3 + 1];
            T tn = (*row_stats)[size_t(r) * 3 + 2];
            T denom = sn * tn + eps;
            T inv = T(1) / denom;
            if (track_grad(ps)) {
                T* gs = ps.grad().data() + r * d;
                // d cos/ds = t/denom - dot * (t_norm * s/s_norm) / denom^2
                T c2 = sn > 0 ? dot * tn / (sn * denom * denom) : T(0);
                for (int64_t j = 0; j < d; ++j) gs[j] += g * (tp[j] * inv - c2 * sp[j]);
            }
            if (track_grad(pt)) {
                T* gt = pt.grad().data() + r * d;
                T c2 = tn > 0 ? dot * sn / (tn * denom * denom) : T(0);
                for (int64_t j = 0; j < d; ++j) gt[j] += g * (sp[j] * inv - c2 * tp[j]);
            }
        }
    });
    return out;
}

// mean negative log-likelihood over rows; labels are class indices
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int64_t>& labels) {
    if (logits.rank() != 2)
        throw shape_error(strcat("softmax_cross_entropy: want [B,K], got ",
                                 shape_str(logits.shape())));
    const int64_t B = logits.dim(0), K = logits.dim(1);
    if (int64_t(labels.size()) != B)
        throw shape_error(strcat("softmax_cross_entropy: ", labels.size(), " labels for batch ",
                                 B));
    for (int64_t y : labels)
        if (y < 0 || y >= K) throw data_error(strcat("label ", y, " out of vocabulary [0,", K, ")"));
    auto probs = std::make_shared<std::vector<T>>(size_t(B * K));
    T acc = 0;
    for (int64_t b = 0; b < B; ++b) {
        const T* lp = logits.ptr() + b * K;
        T* pp = probs->data() + b * K;
        T mx = lp[0];
        for (int64_t j = 1; j < K; ++j) mx = std::max(mx, lp[j]);
        T sum = 0;
        for (int64_t j = 0; j < K; ++j) {
            pp[j] = std::exp(lp[j] - mx);
            sum += pp[j];
        }
        T inv = T(1) / sum;
        for (int64_t j = 0; j < K; ++j) pp[j] *= inv;
        acc -= std::log(pp[labels[size_t(b)]] + T(1e-30));
    }
    Tensor<T> out = Tensor<T>::scalar(acc / T(B));
    attach<T>(out, "softmax_cross_entropy", {logits}, [B, K, labels, probs](Tensor<T>& o) {
        auto& pl = o.node->parents[0];
        if (!track_grad(pl)) return;
        T g = o.grad()[0] / T(B);
        T* gl = pl.grad().data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t j = 0; j < K; ++j)
                gl[b * K + j] += g * ((*probs)[size_t(b * K + j)] -
                                      (j == labels[size_t(b)] ? T(1) : T(0)));
    });
    return out;
}

// ---------------------------------------------------------------------------
// non-learned builders
// ---------------------------------------------------------------------------

// Factored 3-axis sine-cosine table for a (t, h, w) grid, row-major (t, h, w).
// d splits into three near-equal even parts, one per axis.
template <class T>
Tensor<T> sincos_positions(int64_t t, int64_t h, int64_t w, int64_t d) {
    if (t < 1 || h < 1 || w < 1) throw config_error("sincos_positions: empty grid");
    if (d < 6 || d % 2 != 0)
        throw config_error(strcat("sincos_positions: dim ", d,
                                  " cannot split into 3 even parts"));
    int64_t base = 2 * ((d + 3) / 6);  // nearest even to d/3
    int64_t dw = d - 2 * base;
    if (base < 2 || dw < 2)
        throw config_error(strcat("sincos_positions: dim ", d, " too small for 3 axes"));
    const int64_t part[3] = {base, base, dw};
    Tensor<T> out({t * h * w, d});
    auto fill_axis = [](int64_t axis_dim, int64_t pos, T* dst) {
        int64_t half = axis_dim / 2;
        for (int64_t i = 0; i < half; ++i) {
            double freq = std::pow(10000.0, -double(i) / double(half));
            double a = double(pos) * freq;
            dst[i] = T(std::sin(a));
            dst[half + i] = T(std::cos(a));
        }
    };
    for (int64_t it = 0; it < t; ++it)
        for (int64_t ih = 0; ih < h; ++ih)
            for (int64_t iw = 0; iw < w; ++iw) {
                T* row = out.ptr() + ((it * h + ih) * w + iw) * d;
                fill_axis(part[0], it, row);
                fill_axis(part[1], ih, row + part[0]);
                fill_axis(part[2], iw, row + part[0] + part[1]);
            }
    return out;
}

}  // namespace ops
}  // namespace epd
