#pragma once

// Pixel-shuffle tokenization of [B, C, T, H, W] clips and sparse frame
// sampling. patchify/unpatchify are exact inverses of each other.

#include <optional>

#include "epd/tensor.hpp"

namespace epd {

template <class T>
struct PatchGrid {
    Tensor<T> tokens;  // [B, N, P], token order (t', h', w') row-major
    int64_t gt = 0, gh = 0, gw = 0;  // grid extents
    int64_t pt = 1, p = 1;           // temporal / spatial patch size
    int64_t channels = 0;

    int64_t num_tokens() const { return gt * gh * gw; }
    int64_t patch_dim() const { return channels * pt * p * p; }
};

template <class T>
PatchGrid<T> patchify(const Tensor<T>& v, int64_t pt, int64_t p) {
    if (v.rank() != 5)
        throw shape_error(strcat("patchify: want [B,C,T,H,W], got ", shape_str(v.shape())));
    const int64_t B = v.dim(0), C = v.dim(1), Tn = v.dim(2), H = v.dim(3), W = v.dim(4);
    if (pt < 1 || p < 1) throw config_error("patchify: patch sizes must be positive");
    if (Tn % pt != 0)
        throw config_error(strcat("patchify: temporal axis ", Tn, " not divisible by pt=", pt));
    if (H % p != 0)
        throw config_error(strcat("patchify: height ", H, " not divisible by p=", p));
    if (W % p != 0)
        throw config_error(strcat("patchify: width ", W, " not divisible by p=", p));

    PatchGrid<T> g;
    g.gt = Tn / pt;
    g.gh = H / p;
    g.gw = W / p;
    g.pt = pt;
    g.p = p;
    g.channels = C;
    const int64_t N = g.num_tokens(), P = g.patch_dim();
    g.tokens = Tensor<T>({B, N, P});

    for (int64_t b = 0; b < B; ++b)
        for (int64_t tt = 0; tt < g.gt; ++tt)
            for (int64_t hh = 0; hh < g.gh; ++hh)
                for (int64_t ww = 0; ww < g.gw; ++ww) {
                    const int64_t n = (tt * g.gh + hh) * g.gw + ww;
                    T* dst = g.tokens.ptr() + (b * N + n) * P;
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t dt = 0; dt < pt; ++dt)
                            for (int64_t dy = 0; dy < p; ++dy)
                                for (int64_t dx = 0; dx < p; ++dx) {
                                    const int64_t src =
                                        (((b * C + c) * Tn + tt * pt + dt) * H + hh * p + dy) * W +
                                        ww * p + dx;
                                    dst[((c * pt + dt) * p + dy) * p + dx] = v.ptr()[src];
                                }
                }
    return g;
}

template <class T>
Tensor<T> unpatchify(const PatchGrid<T>& g) {
    if (!g.tokens.defined() || g.tokens.rank() != 3)
        throw format_error("unpatchify: grid carries no [B,N,P] tokens");
    const int64_t B = g.tokens.dim(0), N = g.tokens.dim(1), P = g.tokens.dim(2);
    if (N != g.num_tokens() || P != g.patch_dim())
        throw format_error(strcat("unpatchify: tokens ", shape_str(g.tokens.shape()),
                                  " inconsistent with grid ", g.gt, "x", g.gh, "x", g.gw,
                                  " patch ", g.pt, "x", g.p, "x", g.p, " C=", g.channels));
    const int64_t C = g.channels, Tn = g.gt * g.pt, H = g.gh * g.p, W = g.gw * g.p;
    Tensor<T> v({B, C, Tn, H, W});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t tt = 0; tt < g.gt; ++tt)
            for (int64_t hh = 0; hh < g.gh; ++hh)
                for (int64_t ww = 0; ww < g.gw; ++ww) {
                    const int64_t n = (tt * g.gh + hh) * g.gw + ww;
                    const T* src = g.tokens.ptr() + (b * N + n) * P;
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t dt = 0; dt < g.pt; ++dt)
                            for (int64_t dy = 0; dy < g.p; ++dy)
                                for (int64_t dx = 0; dx < g.p; ++dx) {
                                    const int64_t dst = (((b * C + c) * Tn + tt * g.pt + dt) * H +
                                                         hh * g.p + dy) *
                                                            W +
                                                        ww * g.p + dx;
                                    v.ptr()[dst] = src[((c * g.pt + dt) * g.p + dy) * g.p + dx];
                                }
                }
    return v;
}

// One index per equal segment, strictly increasing.
inline std::vector<int64_t> sparse_sample(int64_t available, int64_t count, Rng* rng = nullptr) {
    if (available < count)
        throw data_error(strcat("sparse_sample: ", available, " frames available, ", count,
                                " requested"));
    if (count < 1) throw contract_error("sparse_sample: count must be positive");
    std::vector<int64_t> idx(static_cast<size_t>(count), 0);
    for (int64_t i = 0; i < count; ++i) {
        int64_t lo = i * available / count;
        int64_t hi = (i + 1) * available / count;  // exclusive
        idx[size_t(i)] = rng ? rng->uniform_int(lo, hi - 1) : (lo + hi) / 2;
    }
    return idx;
}

}  // namespace epd
