#pragma once

// Deterministic moving-shapes video generator with ground-truth class labels,
// per-frame metric depth and per-object boxes. Class id encodes
// (shape type of the primary object) x (quantized motion direction), so the
// classification, depth and tracking probes all have learnable signal:
// shape size and brightness fall off with depth, the background carries a
// vertical depth gradient, and motion is constant-velocity until a shape
// reaches the frame border.

#include <algorithm>
#include <vector>

#include "epd/archive.hpp"
#include "epd/tensor.hpp"

namespace epd {

struct SynthConfig {
    int64_t batch = 32;
    int64_t frames = 8;
    int64_t height = 32;
    int64_t width = 32;
    int64_t min_shapes = 1, max_shapes = 4;
    double min_speed = 0.8, max_speed = 3.0;  // px / frame
    double depth_near = 1.0, depth_far = 7.0; // shape depth layers, meters
    int64_t shape_types = 2;                  // 0 square, 1 disk, 2 diamond
    int64_t directions = 8;

    int64_t num_classes() const { return shape_types * directions; }

    void validate() const {
        if (batch < 1 || frames < 1 || height < 4 || width < 4)
            throw config_error("SynthConfig: degenerate geometry");
        if (min_shapes < 1 || max_shapes < min_shapes)
            throw config_error("SynthConfig: bad shape count range");
        if (shape_types < 1 || shape_types > 3 || directions < 1)
            throw config_error("SynthConfig: bad class vocabulary");
        if (!(depth_near > 0) || depth_far <= depth_near)
            throw config_error("SynthConfig: bad depth layer range");
    }
};

struct Box {
    int64_t object_id = 0;
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

template <class T>
struct VideoBatch {
    Tensor<T> pixels;  // [B, C=3, T, H, W] in [0,1]
    Tensor<T> depth;   // [B, T, H, W], meters, > 0
    std::vector<int64_t> class_ids;                 // [B]
    std::vector<std::vector<std::vector<Box>>> boxes;  // [B][T][objects]
};

// Fully resolved description of one clip; rendering is a pure function of it.
struct ShapeSpec {
    int64_t type = 0;          // 0 square, 1 disk, 2 diamond
    double cx = 0, cy = 0;     // start center, px
    double vx = 0, vy = 0;     // px / frame
    double depth = 1.0;
    double size = 8.0;         // full extent, px
    double color[3] = {1, 1, 1};
};

struct ClipSpec {
    // background: per-channel linear gradient + low-frequency wave
    double bg_base[3] = {0.5, 0.5, 0.5};
    double bg_dx[3] = {0, 0, 0}, bg_dy[3] = {0, 0, 0};
    double bg_wave_amp = 0.0, bg_wave_fx = 1.0, bg_wave_fy = 1.0, bg_wave_phase = 0.0;
    double bg_depth0 = 5.0, bg_depth_gain = 4.0;  // depth(y) = d0 + gain*y/H
    std::vector<ShapeSpec> shapes;  // shapes[0] is the primary (class-defining) object
    int64_t class_id = 0;
};

namespace detail {

inline double clamp01(double v) { return v < 0 ? 0 : (v > 1 ? 1 : v); }

inline double clamp_center(double c, double half, double extent) {
    double lo = half, hi = extent - half;
    if (lo > hi) return extent / 2;
    return std::min(std::max(c, lo), hi);
}

inline bool inside_shape(const ShapeSpec& s, double cx, double cy, double px, double py) {
    double dx = px - cx, dy = py - cy, half = s.size / 2;
    switch (s.type) {
        case 0: return std::abs(dx) <= half && std::abs(dy) <= half;
        case 1: return dx * dx + dy * dy <= half * half;
        default: return std::abs(dx) + std::abs(dy) <= half;
    }
}

}  // namespace detail

inline ClipSpec sample_clip_spec(const SynthConfig& cfg, Rng rng) {
    ClipSpec c;
    for (int ch = 0; ch < 3; ++ch) {
        c.bg_base[ch] = rng.uniform(0.25, 0.6);
        c.bg_dx[ch] = rng.uniform(-0.2, 0.2);
        c.bg_dy[ch] = rng.uniform(-0.2, 0.2);
    }
    c.bg_wave_amp = rng.uniform(0.02, 0.08);
    c.bg_wave_fx = rng.uniform(0.5, 2.0);
    c.bg_wave_fy = rng.uniform(0.5, 2.0);
    c.bg_wave_phase = rng.uniform(0.0, 6.283185307179586);
    c.bg_depth0 = rng.uniform(4.0, 6.0);
    c.bg_depth_gain = rng.uniform(3.0, 5.0);

    c.class_id = rng.uniform_int(0, cfg.num_classes() - 1);
    const int64_t n_shapes = rng.uniform_int(cfg.min_shapes, cfg.max_shapes);
    const double ref_depth = 0.5 * (cfg.depth_near + cfg.depth_far);

    for (int64_t i = 0; i < n_shapes; ++i) {
        ShapeSpec s;
        int64_t dir;
        if (i == 0) {
            s.type = c.class_id / cfg.directions;
            dir = c.class_id % cfg.directions;
        } else {
            s.type = rng.uniform_int(0, cfg.shape_types - 1);
            dir = rng.uniform_int(0, cfg.directions - 1);
        }
        double angle = 6.283185307179586 * double(dir) / double(cfg.directions);
        double speed = rng.uniform(cfg.min_speed, cfg.max_speed);
        s.vx = speed * std::cos(angle);
        s.vy = speed * std::sin(angle);
        s.depth = rng.uniform(cfg.depth_near, cfg.depth_far);
        // perspective cue: nearer objects are bigger
        double base = rng.uniform(0.22, 0.34) * double(std::min(cfg.height, cfg.width));
        s.size = std::clamp(base * ref_depth / s.depth, 4.0, double(std::min(cfg.height, cfg.width)) * 0.6);
        // start near the middle so direction stays readable before clamping
        s.cx = detail::clamp_center(rng.uniform(0.25, 0.75) * double(cfg.width), s.size / 2,
                                    double(cfg.width));
        s.cy = detail::clamp_center(rng.uniform(0.25, 0.75) * double(cfg.height), s.size / 2,
                                    double(cfg.height));
        // shading cue: brightness falls off with depth
        double shade = 1.0 - 0.06 * (s.depth - cfg.depth_near);
        for (int ch = 0; ch < 3; ++ch) s.color[ch] = detail::clamp01(rng.uniform(0.35, 1.0) * shade);
        c.shapes.push_back(s);
    }
    return c;
}

// Rasterize one clip into the batch at index b.
template <class T>
void render_clip(const ClipSpec& spec, const SynthConfig& cfg, VideoBatch<T>& out, int64_t b) {
    const int64_t Tn = cfg.frames, H = cfg.height, W = cfg.width;
    auto pix = [&](int64_t ch, int64_t t, int64_t y, int64_t x) -> T& {
        return out.pixels.ptr()[(((b * 3 + ch) * Tn + t) * H + y) * W + x];
    };
    auto dep = [&](int64_t t, int64_t y, int64_t x) -> T& {
        return out.depth.ptr()[((b * Tn + t) * H + y) * W + x];
    };

    // background, static over time
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double fx = (double(x) + 0.5) / double(W), fy = (double(y) + 0.5) / double(H);
            double wave = spec.bg_wave_amp *
                          std::sin(6.283185307179586 * (spec.bg_wave_fx * fx + spec.bg_wave_fy * fy) +
                                   spec.bg_wave_phase);
            double bg_depth = spec.bg_depth0 + spec.bg_depth_gain * fy;
            for (int64_t t = 0; t < Tn; ++t) {
                for (int ch = 0; ch < 3; ++ch)
                    pix(ch, t, y, x) =
                        T(detail::clamp01(spec.bg_base[ch] + spec.bg_dx[ch] * fx +
                                          spec.bg_dy[ch] * fy + wave));
                dep(t, y, x) = T(bg_depth);
            }
        }

    // paint far to near so occlusion overwrites both pixels and depth
    std::vector<size_t> order(spec.shapes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t c) {
        return spec.shapes[a].depth > spec.shapes[c].depth;
    });

    out.boxes[size_t(b)].assign(size_t(Tn), {});
    for (int64_t t = 0; t < Tn; ++t) {
        for (size_t oi : order) {
            const ShapeSpec& s = spec.shapes[oi];
            double half = s.size / 2;
            double cx = detail::clamp_center(s.cx + s.vx * double(t), half, double(W));
            double cy = detail::clamp_center(s.cy + s.vy * double(t), half, double(H));
            int64_t x_lo = std::max<int64_t>(0, int64_t(std::floor(cx - half)));
            int64_t x_hi = std::min<int64_t>(W - 1, int64_t(std::ceil(cx + half)));
            int64_t y_lo = std::max<int64_t>(0, int64_t(std::floor(cy - half)));
            int64_t y_hi = std::min<int64_t>(H - 1, int64_t(std::ceil(cy + half)));
            for (int64_t y = y_lo; y <= y_hi; ++y)
                for (int64_t x = x_lo; x <= x_hi; ++x)
                    if (detail::inside_shape(s, cx, cy, double(x) + 0.5, double(y) + 0.5)) {
                        for (int ch = 0; ch < 3; ++ch) pix(ch, t, y, x) = T(s.color[ch]);
                        dep(t, y, x) = T(s.depth);
                    }
        }
        // boxes in object order (object_id = index into spec.shapes)
        for (size_t oi = 0; oi < spec.shapes.size(); ++oi) {
            const ShapeSpec& s = spec.shapes[oi];
            double half = s.size / 2;
            double cx = detail::clamp_center(s.cx + s.vx * double(t), half, double(W));
            double cy = detail::clamp_center(s.cy + s.vy * double(t), half, double(H));
            Box bx;
            bx.object_id = int64_t(oi);
            bx.x0 = std::max(0.0, cx - half);
            bx.x1 = std::min(double(W), cx + half);
            bx.y0 = std::max(0.0, cy - half);
            bx.y1 = std::min(double(H), cy + half);
            out.boxes[size_t(b)][size_t(t)].push_back(bx);
        }
    }
}

template <class T>
VideoBatch<T> gen_moving_shapes(const SynthConfig& cfg, uint64_t seed) {
    cfg.validate();
    VideoBatch<T> out;
    out.pixels = Tensor<T>({cfg.batch, 3, cfg.frames, cfg.height, cfg.width});
    out.depth = Tensor<T>({cfg.batch, cfg.frames, cfg.height, cfg.width});
    out.class_ids.resize(size_t(cfg.batch));
    out.boxes.resize(size_t(cfg.batch));
    Rng root(seed, "synth");
    for (int64_t b = 0; b < cfg.batch; ++b) {
        ClipSpec spec = sample_clip_spec(cfg, root.fork(uint64_t(b)));
        out.class_ids[size_t(b)] = spec.class_id;
        render_clip(spec, cfg, out, b);
    }
    return out;
}

// --- clip fixture io (flat binary via the archive container) ---

template <class T>
void save_video_batch(const VideoBatch<T>& vb, const std::string& path) {
    Archive a;
    a.put("pixels", vb.pixels);
    a.put("depth", vb.depth);
    a.put_vector("class_ids", vb.class_ids);
    std::vector<int64_t> counts;
    std::vector<double> flat;
    for (auto& clip : vb.boxes)
        for (auto& frame : clip) {
            counts.push_back(int64_t(frame.size()));
            for (auto& b : frame) {
                flat.push_back(double(b.object_id));
                flat.push_back(b.x0);
                flat.push_back(b.y0);
                flat.push_back(b.x1);
                flat.push_back(b.y1);
            }
        }
    a.put_vector("box_counts", counts);
    a.put_vector("box_data", flat);
    a.meta()["kind"] = "video_batch";
    a.save(path);
}

template <class T>
VideoBatch<T> load_video_batch(const std::string& path) {
    Archive a = Archive::load(path);
    VideoBatch<T> vb;
    vb.pixels = a.get<T>("pixels");
    vb.depth = a.get<T>("depth");
    vb.class_ids = a.get_vector<int64_t>("class_ids");
    if (vb.pixels.rank() != 5) throw format_error(strcat(path, ": pixels must be [B,C,T,H,W]"));
    const int64_t B = vb.pixels.dim(0), Tn = vb.pixels.dim(2);
    auto counts = a.get_vector<int64_t>("box_counts");
    auto flat = a.get_vector<double>("box_data");
    if (int64_t(counts.size()) != B * Tn) throw format_error(strcat(path, ": box counts truncated"));
    vb.boxes.assign(size_t(B), {});
    size_t pos = 0;
    for (int64_t b = 0; b < B; ++b) {
        vb.boxes[size_t(b)].assign(size_t(Tn), {});
        for (int64_t t = 0; t < Tn; ++t) {
            int64_t n = counts[size_t(b * Tn + t)];
            for (int64_t i = 0; i < n; ++i) {
                if (pos + 5 > flat.size()) throw format_error(strcat(path, ": box data truncated"));
                Box bx;
                bx.object_id = int64_t(flat[pos]);
                bx.x0 = flat[pos + 1];
                bx.y0 = flat[pos + 2];
                bx.x1 = flat[pos + 3];
                bx.y1 = flat[pos + 4];
                pos += 5;
                vb.boxes[size_t(b)][size_t(t)].push_back(bx);
            }
        }
    }
    return vb;
}

}  // namespace epd
