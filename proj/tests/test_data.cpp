// Synthetic generator, patchify/unpatchify, sparse sampling and clip/archive io.

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "epd/patch.hpp"
#include "epd/synth.hpp"

using namespace epd;

namespace {

SynthConfig tiny_cfg() {
    SynthConfig cfg;
    cfg.batch = 2;
    cfg.frames = 4;
    cfg.height = 16;
    cfg.width = 16;
    return cfg;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST(Synth, DeterministicPerSeed) {
    auto cfg = tiny_cfg();
    auto a = gen_moving_shapes<float>(cfg, 99);
    auto b = gen_moving_shapes<float>(cfg, 99);
    ASSERT_EQ(a.pixels.numel(), b.pixels.numel());
    EXPECT_EQ(checksum(a.pixels), checksum(b.pixels));
    EXPECT_EQ(checksum(a.depth), checksum(b.depth));
    EXPECT_EQ(a.class_ids, b.class_ids);
}

TEST(Synth, DifferentSeedsDiffer) {
    auto cfg = tiny_cfg();
    for (uint64_t s = 0; s < 20; ++s) {
        auto a = gen_moving_shapes<float>(cfg, s);
        auto b = gen_moving_shapes<float>(cfg, s + 1000);
        EXPECT_NE(checksum(a.pixels), checksum(b.pixels)) << "seed pair " << s;
    }
}

TEST(Synth, ConstantVelocityAdvancesBoxUntilClamped) {
    SynthConfig cfg = tiny_cfg();
    cfg.batch = 1;
    cfg.frames = 8;
    cfg.width = 32;
    cfg.height = 32;
    ClipSpec spec;
    ShapeSpec s;
    s.type = 0;
    s.cx = 8;
    s.cy = 16;
    s.vx = 2;
    s.vy = 0;
    s.size = 8;
    s.depth = 2.0;
    spec.shapes.push_back(s);
    VideoBatch<float> vb;
    vb.pixels = Tensor<float>({1, 3, cfg.frames, cfg.height, cfg.width});
    vb.depth = Tensor<float>({1, cfg.frames, cfg.height, cfg.width});
    vb.boxes.resize(1);
    render_clip(spec, cfg, vb, 0);
    for (int64_t t = 0; t < cfg.frames; ++t) {
        const Box& b = vb.boxes[0][size_t(t)][0];
        double expect_cx = std::min(8.0 + 2.0 * double(t), 32.0 - 4.0);
        EXPECT_DOUBLE_EQ(b.x0, expect_cx - 4.0) << "frame " << t;
        EXPECT_DOUBLE_EQ(b.x1, expect_cx + 4.0);
        EXPECT_DOUBLE_EQ(b.y0, 12.0);
    }
}

TEST(Synth, ClassDistributionUniformWithin3Sigma) {
    SynthConfig cfg = tiny_cfg();
    cfg.batch = 1000;
    auto vb = gen_moving_shapes<float>(cfg, 7);
    std::vector<int64_t> counts(size_t(cfg.num_classes()), 0);
    for (int64_t c : vb.class_ids) {
        ASSERT_GE(c, 0);
        ASSERT_LT(c, cfg.num_classes());
        counts[size_t(c)]++;
    }
    const double p = 1.0 / double(cfg.num_classes());
    const double expect = 1000 * p;
    const double sigma = std::sqrt(1000 * p * (1 - p));
    for (size_t c = 0; c < counts.size(); ++c)
        EXPECT_LE(std::abs(double(counts[c]) - expect), 3 * sigma) << "class " << c;
}

TEST(Synth, PixelsInRangeDepthPositiveBoxesWellFormed) {
    auto cfg = tiny_cfg();
    cfg.batch = 8;
    auto vb = gen_moving_shapes<float>(cfg, 3);
    for (int64_t i = 0; i < vb.pixels.numel(); ++i) {
        ASSERT_GE(vb.pixels.ptr()[i], 0.f);
        ASSERT_LE(vb.pixels.ptr()[i], 1.f);
    }
    for (int64_t i = 0; i < vb.depth.numel(); ++i) ASSERT_GT(vb.depth.ptr()[i], 0.f);
    for (auto& clip : vb.boxes)
        for (auto& frame : clip)
            for (auto& b : frame) {
                ASSERT_LT(b.x0, b.x1);
                ASSERT_LT(b.y0, b.y1);
                ASSERT_GE(b.x0, 0.0);
                ASSERT_GE(b.y0, 0.0);
                ASSERT_LE(b.x1, double(cfg.width));
                ASSERT_LE(b.y1, double(cfg.height));
            }
}

TEST(Synth, OcclusionNearerShapeWins) {
    SynthConfig cfg = tiny_cfg();
    cfg.batch = 1;
    cfg.frames = 1;
    cfg.width = 32;
    cfg.height = 32;
    ClipSpec spec;
    ShapeSpec far_shape, near_shape;
    far_shape.type = 0;
    far_shape.cx = far_shape.cy = 16;
    far_shape.size = 12;
    far_shape.depth = 6.0;
    far_shape.color[0] = 1.0;
    far_shape.color[1] = 0.0;
    far_shape.color[2] = 0.0;
    near_shape = far_shape;
    near_shape.depth = 2.0;
    near_shape.size = 6;
    near_shape.color[0] = 0.0;
    near_shape.color[1] = 1.0;
    spec.shapes = {far_shape, near_shape};
    VideoBatch<float> vb;
    vb.pixels = Tensor<float>({1, 3, 1, 32, 32});
    vb.depth = Tensor<float>({1, 1, 32, 32});
    vb.boxes.resize(1);
    render_clip(spec, cfg, vb, 0);
    // center pixel belongs to the nearer (green, depth 2) shape
    EXPECT_FLOAT_EQ(vb.depth.at({0, 0, 16, 16}), 2.0f);
    EXPECT_FLOAT_EQ(vb.pixels.at({0, 1, 0, 16, 16}), 1.0f);
    EXPECT_FLOAT_EQ(vb.pixels.at({0, 0, 0, 16, 16}), 0.0f);
    // a ring pixel inside the far shape only
    EXPECT_FLOAT_EQ(vb.depth.at({0, 0, 16, 11}), 6.0f);
    EXPECT_FLOAT_EQ(vb.pixels.at({0, 0, 0, 16, 11}), 1.0f);
}

TEST(Patchify, PaperAndToyTokenArithmetic) {
    Tensor<float> paper({1, 3, 8, 224, 224});
    auto g = patchify(paper, 1, 14);
    EXPECT_EQ(g.num_tokens(), 2048);  // 8 * 16 * 16
    EXPECT_EQ(g.patch_dim(), 588);    // 3 * 1 * 14 * 14
    EXPECT_EQ(g.tokens.shape(), (Shape{1, 2048, 588}));

    Tensor<float> toy({2, 3, 4, 16, 16});
    auto gt = patchify(toy, 1, 4);
    EXPECT_EQ(gt.num_tokens(), 64);
    EXPECT_EQ(gt.patch_dim(), 48);
}

TEST(Patchify, RoundTripBitExact) {
    Rng rng(17, "patch");
    Tensor<float> v = Tensor<float>::rand_uniform({2, 3, 4, 16, 16}, rng);
    auto g = patchify(v, 2, 4);
    auto back = unpatchify(g);
    ASSERT_EQ(back.shape(), v.shape());
    for (int64_t i = 0; i < v.numel(); ++i) ASSERT_EQ(back.ptr()[i], v.ptr()[i]);
}

TEST(Patchify, FuzzRoundTripRandomShapes) {
    Rng rng(18, "patch-fuzz");
    const int64_t cases[5][7] = {
        {1, 3, 2, 8, 8, 1, 2},  {2, 1, 4, 12, 8, 2, 4}, {1, 2, 6, 6, 18, 3, 3},
        {3, 3, 1, 4, 4, 1, 4},  {1, 1, 8, 16, 4, 4, 2},
    };
    for (auto& c : cases) {
        Tensor<double> v = Tensor<double>::randn({c[0], c[1], c[2], c[3], c[4]}, rng);
        auto g = patchify(v, c[5], c[6]);
        auto back = unpatchify(g);
        for (int64_t i = 0; i < v.numel(); ++i) ASSERT_EQ(back.ptr()[i], v.ptr()[i]);
    }
}

TEST(Patchify, SingleTokenGridPlacesPatchAtOrigin) {
    Tensor<float> v({1, 1, 1, 2, 2}, {1.f, 2.f, 3.f, 4.f});
    auto g = patchify(v, 1, 2);
    EXPECT_EQ(g.num_tokens(), 1);
    auto back = unpatchify(g);
    EXPECT_EQ(back.at({0, 0, 0, 0, 0}), 1.f);
    EXPECT_EQ(back.at({0, 0, 0, 1, 1}), 4.f);
}

TEST(Patchify, DivisibilityErrorsNameOffendingAxis) {
    Tensor<float> v({1, 3, 5, 16, 16});
    try {
        patchify(v, 2, 4);
        FAIL();
    } catch (const config_error& e) {
        EXPECT_NE(std::string(e.what()).find("temporal"), std::string::npos);
    }
    Tensor<float> v2({1, 3, 4, 15, 16});
    try {
        patchify(v2, 2, 4);
        FAIL();
    } catch (const config_error& e) {
        EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
    }
}

TEST(Patchify, MetadataInconsistencyRejected) {
    Tensor<float> v({1, 3, 4, 16, 16});
    auto g = patchify(v, 1, 4);
    g.gh = 7;  // corrupt
    EXPECT_THROW(unpatchify(g), format_error);
}

TEST(SparseSample, MidpointsAndIdentity) {
    auto all = sparse_sample(8, 8);
    for (int64_t i = 0; i < 8; ++i) EXPECT_EQ(all[size_t(i)], i);
    auto mids = sparse_sample(16, 4);
    EXPECT_EQ(mids, (std::vector<int64_t>{2, 6, 10, 14}));
    EXPECT_THROW(sparse_sample(3, 4), data_error);
}

TEST(SparseSample, StrictlyIncreasingRandomDraws) {
    Rng rng(19, "sparse");
    for (int trial = 0; trial < 100; ++trial) {
        int64_t avail = 8 + int64_t(trial % 40);
        int64_t count = 4 + int64_t(trial % 5);
        auto idx = sparse_sample(avail, count, &rng);
        for (size_t i = 1; i < idx.size(); ++i) ASSERT_GT(idx[i], idx[i - 1]);
        ASSERT_GE(idx.front(), 0);
        ASSERT_LT(idx.back(), avail);
    }
}

TEST(Archive, RoundTripBytesStable) {
    Archive a;
    Rng rng(20, "arch");
    a.put("alpha.weight", Tensor<float>::randn({3, 4}, rng));
    a.put("beta.bias", Tensor<double>::randn({5}, rng));
    a.put_vector("labels", std::vector<int64_t>{3, 1, 4});
    a.put_vector("empty", std::vector<double>{});
    a.meta()["kind"] = "test";
    std::string p1 = tmp_path("epd_arch_1.bin"), p2 = tmp_path("epd_arch_2.bin");
    a.save(p1);
    Archive b = Archive::load(p1);
    b.save(p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    EXPECT_EQ(s1, s2);
    EXPECT_EQ(b.get_vector<int64_t>("labels"), (std::vector<int64_t>{3, 1, 4}));
    EXPECT_TRUE(b.get_vector<double>("empty").empty());
    auto w = b.get<float>("alpha.weight");
    EXPECT_EQ(w.shape(), (Shape{3, 4}));
    EXPECT_EQ(checksum(w), checksum(a.get<float>("alpha.weight")));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST(Archive, CorruptionAndMissingNamesAreTypedErrors) {
    Archive a;
    a.put("x", Tensor<float>({2}, {1.f, 2.f}));
    std::string p = tmp_path("epd_arch_corrupt.bin");
    a.save(p);
    // bit-flip in the data section
    std::fstream f(p, std::ios::binary | std::ios::in | std::ios::out);
    f.seekg(0, std::ios::end);
    auto end = f.tellg();
    f.seekp(std::streamoff(end) - 2);
    char c;
    f.seekg(std::streamoff(end) - 2);
    f.read(&c, 1);
    c ^= 0x40;
    f.seekp(std::streamoff(end) - 2);
    f.write(&c, 1);
    f.close();
    EXPECT_THROW(Archive::load(p), io_error);
    EXPECT_NO_THROW(Archive::load(p, false));
    try {
        Archive::load(p, false).get<float>("missing.name");
        FAIL();
    } catch (const io_error& e) {
        EXPECT_NE(std::string(e.what()).find("missing.name"), std::string::npos);
    }
    std::remove(p.c_str());
}

TEST(ClipIo, VideoBatchRoundTrip) {
    auto cfg = tiny_cfg();
    auto vb = gen_moving_shapes<float>(cfg, 5);
    std::string p = tmp_path("epd_clip.bin");
    save_video_batch(vb, p);
    auto back = load_video_batch<float>(p);
    EXPECT_EQ(checksum(back.pixels), checksum(vb.pixels));
    EXPECT_EQ(checksum(back.depth), checksum(vb.depth));
    EXPECT_EQ(back.class_ids, vb.class_ids);
    ASSERT_EQ(back.boxes.size(), vb.boxes.size());
    for (size_t b = 0; b < vb.boxes.size(); ++b)
        for (size_t t = 0; t < vb.boxes[b].size(); ++t) {
            ASSERT_EQ(back.boxes[b][t].size(), vb.boxes[b][t].size());
            for (size_t i = 0; i < vb.boxes[b][t].size(); ++i) {
                EXPECT_EQ(back.boxes[b][t][i].object_id, vb.boxes[b][t][i].object_id);
                EXPECT_DOUBLE_EQ(back.boxes[b][t][i].x0, vb.boxes[b][t][i].x0);
                EXPECT_DOUBLE_EQ(back.boxes[b][t][i].y1, vb.boxes[b][t][i].y1);
            }
        }
    std::remove(p.c_str());
}
