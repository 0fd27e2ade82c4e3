#pragma once

// Mask generation over the (t', h', w') token grid: random tube (baseline),
// semantic top-k from teacher saliency, and multi-block unions of contiguous
// spatiotemporal blocks. Plus visible/masked splitting of token sequences.

#include <array>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "epd/archive.hpp"
#include "epd/ops.hpp"

namespace epd {

struct TokenGrid {
    int64_t t = 1, h = 1, w = 1;
    int64_t tokens() const { return t * h * w; }
};

// round half away from zero
inline int64_t round_count(double x) { return int64_t(std::llround(x)); }

struct MaskSpec {
    std::vector<uint8_t> mask;  // one byte per token, 1 = masked
    TokenGrid grid;
    double ratio = 0;
    std::string strategy;
    uint64_t seed = 0;
    // multi-block provenance: half-open (t0,t1,h0,h1,w0,w1) per sampled block
    std::vector<std::array<int64_t, 6>> blocks;

    int64_t masked_count() const {
        int64_t c = 0;
        for (uint8_t m : mask) c += m;
        return c;
    }
    double achieved_ratio() const { return double(masked_count()) / double(mask.size()); }

    std::vector<int64_t> masked_positions() const {
        std::vector<int64_t> out;
        for (int64_t i = 0; i < int64_t(mask.size()); ++i)
            if (mask[size_t(i)]) out.push_back(i);
        return out;
    }
    std::vector<int64_t> visible_positions() const {
        std::vector<int64_t> out;
        for (int64_t i = 0; i < int64_t(mask.size()); ++i)
            if (!mask[size_t(i)]) out.push_back(i);
        return out;
    }
};

// One spatial pattern repeated across every frame; exactly round(rho * h * w)
// spatial cells masked per frame.
inline MaskSpec random_tube_mask(const TokenGrid& grid, double rho, uint64_t seed) {
    if (!(rho > 0.0 && rho < 1.0))
        throw config_error(strcat("random_tube_mask: ratio ", rho, " outside (0,1)"));
    const int64_t hw = grid.h * grid.w;
    const int64_t k = round_count(rho * double(hw));
    if (k <= 0 || k >= hw)
        throw config_error(strcat("random_tube_mask: ratio ", rho, " leaves 0 masked or 0 visible cells"));

    std::vector<int64_t> cells(static_cast<size_t>(hw), 0);
    for (int64_t i = 0; i < hw; ++i) cells[size_t(i)] = i;
    Rng rng(seed, "tube_mask");
    for (int64_t i = 0; i < k; ++i) {  // partial Fisher-Yates
        int64_t j = rng.uniform_int(i, hw - 1);
        std::swap(cells[size_t(i)], cells[size_t(j)]);
    }
    MaskSpec spec;
    spec.grid = grid;
    spec.ratio = rho;
    spec.strategy = "tube";
    spec.seed = seed;
    spec.mask.assign(size_t(grid.tokens()), 0);
    for (int64_t i = 0; i < k; ++i)
        for (int64_t t = 0; t < grid.t; ++t) spec.mask[size_t(t * hw + cells[size_t(i)])] = 1;
    return spec;
}

// Masks exactly round(rho * N) highest-saliency tokens; ties break toward the
// lower token index.
template <class T>
MaskSpec semantic_topk_mask(const Tensor<T>& saliency, double rho) {
    if (saliency.rank() != 1)
        throw shape_error(strcat("semantic_topk_mask: want [N], got ", shape_str(saliency.shape())));
    const int64_t N = saliency.numel();
    for (int64_t i = 0; i < N; ++i)
        if (!std::isfinite(double(saliency.ptr()[i])))
            throw data_error(strcat("semantic_topk_mask: non-finite saliency at token ", i));
    if (!(rho > 0.0 && rho < 1.0))
        throw config_error(strcat("semantic_topk_mask: ratio ", rho, " outside (0,1)"));
    const int64_t k = round_count(rho * double(N));
    if (k <= 0 || k >= N)
        throw config_error(strcat("semantic_topk_mask: ratio ", rho, " leaves nothing to mask or see"));

    std::vector<int64_t> order(static_cast<size_t>(N), 0);
    for (int64_t i = 0; i < N; ++i) order[size_t(i)] = i;
    std::nth_element(order.begin(), order.begin() + k, order.end(), [&](int64_t a, int64_t b) {
        T sa = saliency.ptr()[a], sb = saliency.ptr()[b];
        return sa > sb || (sa == sb && a < b);
    });
    MaskSpec spec;
    spec.grid = TokenGrid{1, 1, N};
    spec.ratio = rho;
    spec.strategy = "semantic";
    spec.mask.assign(size_t(N), 0);
    for (int64_t i = 0; i < k; ++i) spec.mask[size_t(order[size_t(i)])] = 1;
    return spec;
}

struct BlockMaskConfig {
    int64_t min_h = 2, max_h = 4;
    int64_t min_w = 2, max_w = 4;
    int64_t max_attempts = 100;
};

// Union of axis-aligned blocks spanning the full temporal extent; resamples
// whole attempts until the achieved ratio lands in [rho-0.05, rho+0.05].
inline MaskSpec multi_block_mask(const TokenGrid& grid, double rho, const BlockMaskConfig& cfg,
                                 uint64_t seed) {
    if (!(rho > 0.0 && rho < 1.0))
        throw config_error(strcat("multi_block_mask: ratio ", rho, " outside (0,1)"));
    if (cfg.min_h < 1 || cfg.max_h < cfg.min_h || cfg.max_h > grid.h || cfg.min_w < 1 ||
        cfg.max_w < cfg.min_w || cfg.max_w > grid.w)
        throw config_error("multi_block_mask: block extents incompatible with grid");
    const int64_t N = grid.tokens(), hw = grid.h * grid.w;
    Rng rng(seed, "multi_block_mask");
    for (int64_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        std::vector<uint8_t> spatial(size_t(hw), 0);
        std::vector<std::array<int64_t, 6>> blocks;
        int64_t covered = 0;
        while (double(covered) < (rho - 0.05) * double(hw)) {
            int64_t bh = rng.uniform_int(cfg.min_h, cfg.max_h);
            int64_t bw = rng.uniform_int(cfg.min_w, cfg.max_w);
            int64_t y0 = rng.uniform_int(0, grid.h - bh);
            int64_t x0 = rng.uniform_int(0, grid.w - bw);
            blocks.push_back({0, grid.t, y0, y0 + bh, x0, x0 + bw});
            for (int64_t y = y0; y < y0 + bh; ++y)
                for (int64_t x = x0; x < x0 + bw; ++x) {
                    uint8_t& cell = spatial[size_t(y * grid.w + x)];
                    if (!cell) {
                        cell = 1;
                        ++covered;
                    }
                }
        }
        double achieved = double(covered) / double(hw);
        if (achieved > rho + 0.05 || covered == hw || covered == 0) continue;
        MaskSpec spec;
        spec.grid = grid;
        spec.ratio = rho;
        spec.strategy = "multi_block";
        spec.seed = seed;
        spec.blocks = std::move(blocks);
        spec.mask.assign(size_t(N), 0);
        for (int64_t t = 0; t < grid.t; ++t)
            for (int64_t c = 0; c < hw; ++c) spec.mask[size_t(t * hw + c)] = spatial[size_t(c)];
        return spec;
    }
    throw config_error(strcat("multi_block_mask: ratio ", rho,
                              " +-0.05 unattainable with the given block sizes after ",
                              cfg.max_attempts, " attempts"));
}

// tokens [B, N, D] -> (visible [B, Nv, D], masked positions ascending)
template <class T>
struct SplitResult {
    Tensor<T> visible;
    std::vector<int64_t> visible_positions;
    std::vector<int64_t> masked_positions;
};

template <class T>
SplitResult<T> split(const Tensor<T>& tokens, const MaskSpec& m) {
    if (tokens.rank() != 3)
        throw shape_error(strcat("split: want [B,N,D], got ", shape_str(tokens.shape())));
    if (tokens.dim(1) != int64_t(m.mask.size()))
        throw shape_error(strcat("split: ", tokens.dim(1), " tokens vs mask over ",
                                 m.mask.size(), " grid cells"));
    SplitResult<T> r;
    r.visible_positions = m.visible_positions();
    r.masked_positions = m.masked_positions();
    if (r.visible_positions.empty()) throw config_error("split: mask leaves no visible tokens");
    r.visible = ops::gather_rows(tokens, r.visible_positions);
    return r;
}

// --- serialization: compact bitset + header ---

inline void mask_to_archive(const MaskSpec& m, Archive& a, const std::string& prefix) {
    std::vector<uint8_t> bits((m.mask.size() + 7) / 8, 0);
    for (size_t i = 0; i < m.mask.size(); ++i)
        if (m.mask[i]) bits[i / 8] |= uint8_t(1u << (i % 8));
    a.put_vector(prefix + ".bits", bits);
    std::vector<int64_t> header = {m.grid.t, m.grid.h, m.grid.w, int64_t(m.mask.size()),
                                   int64_t(m.seed)};
    a.put_vector(prefix + ".header", header);
    a.meta()[prefix + ".strategy"] = m.strategy;
    a.meta()[prefix + ".ratio"] = std::to_string(m.ratio);
    std::vector<int64_t> blocks;
    for (auto& b : m.blocks) blocks.insert(blocks.end(), b.begin(), b.end());
    a.put_vector(prefix + ".blocks", blocks);
}

inline MaskSpec mask_from_archive(const Archive& a, const std::string& prefix) {
    MaskSpec m;
    auto header = a.get_vector<int64_t>(prefix + ".header");
    if (header.size() != 5) throw format_error("mask header must have 5 fields");
    m.grid = TokenGrid{header[0], header[1], header[2]};
    const int64_t n = header[3];
    m.seed = uint64_t(header[4]);
    auto bits = a.get_vector<uint8_t>(prefix + ".bits");
    if (int64_t(bits.size()) != (n + 7) / 8) throw format_error("mask bitset truncated");
    m.mask.assign(size_t(n), 0);
    for (int64_t i = 0; i < n; ++i)
        m.mask[size_t(i)] = (bits[size_t(i / 8)] >> (i % 8)) & 1u;
    m.strategy = a.meta_or(prefix + ".strategy", "");
    m.ratio = std::stod(a.meta_or(prefix + ".ratio", "0"));
    auto blocks = a.get_vector<int64_t>(prefix + ".blocks");
    if (blocks.size() % 6 != 0) throw format_error("mask block list truncated");
    for (size_t i = 0; i + 6 <= blocks.size(); i += 6)
        m.blocks.push_back({blocks[i], blocks[i + 1], blocks[i + 2], blocks[i + 3], blocks[i + 4],
                            blocks[i + 5]});
    return m;
}

}  // namespace epd
