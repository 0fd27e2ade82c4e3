// Frozen teachers and the alignment / latent-prediction objectives.

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "epd/gradcheck.hpp"
#include "epd/losses.hpp"
#include "epd/synth.hpp"
#include "epd/teacher.hpp"

using namespace epd;

namespace {

ToyTeacherConfig tiny_teacher_cfg() {
    ToyTeacherConfig cfg;
    cfg.dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.patch = 4;
    cfg.seed = 7;
    return cfg;
}

Tensor<float> tiny_pixels(uint64_t seed) {
    SynthConfig sc;
    sc.batch = 2;
    sc.frames = 2;
    sc.height = 8;
    sc.width = 8;
    return gen_moving_shapes<float>(sc, seed).pixels;
}

}  // namespace

TEST(ToyTeacher, DeterministicAndNormalizedSaliency) {
    ToyTeacher<float> teacher(tiny_teacher_cfg());
    auto px = tiny_pixels(1);
    TokenGrid grid{2, 2, 2};
    auto a = teacher.embed(px, grid);
    auto b = teacher.embed(px, grid);
    EXPECT_EQ(checksum(a.tokens), checksum(b.tokens));
    EXPECT_EQ(checksum(a.saliency), checksum(b.saliency));
    EXPECT_EQ(a.tokens.shape(), (Shape{2, 8, 16}));
    EXPECT_EQ(a.saliency.shape(), (Shape{2, 8}));
    for (int64_t bi = 0; bi < 2; ++bi) {
        double sum = 0;
        for (int64_t n = 0; n < 8; ++n) {
            sum += a.saliency.at({bi, n});
            ASSERT_GT(a.saliency.at({bi, n}), 0.f);
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
    EXPECT_TRUE(a.tokens.all_finite());
}

TEST(ToyTeacher, GridMismatchRejected) {
    ToyTeacher<float> teacher(tiny_teacher_cfg());
    auto px = tiny_pixels(2);
    EXPECT_THROW(teacher.embed(px, TokenGrid{4, 2, 2}), config_error);
}

TEST(ToyTeacher, FrozenAcrossUseAndCarriesNoGrads) {
    ToyTeacher<float> teacher(tiny_teacher_cfg());
    uint64_t before = teacher.state_checksum();
    for (uint64_t s = 0; s < 3; ++s) teacher.embed(tiny_pixels(s), TokenGrid{2, 2, 2});
    EXPECT_EQ(teacher.state_checksum(), before);
    for (auto& [name, p] : teacher.params().items()) {
        EXPECT_FALSE(p.requires_grad) << name;
        EXPECT_FALSE(p.has_grad()) << name;
    }
    // same seed -> bit-identical teacher
    ToyTeacher<float> clone(tiny_teacher_cfg());
    EXPECT_EQ(clone.state_checksum(), before);
}

TEST(FileTeacher, RoundTripAndShapeGuard) {
    ToyTeacher<float> teacher(tiny_teacher_cfg());
    auto px = tiny_pixels(3);
    TokenGrid grid{2, 2, 2};
    auto out = teacher.embed(px, grid);
    std::string path = (std::filesystem::temp_directory_path() / "epd_teacher.bin").string();
    FileTeacher<float>::write(out, path);
    FileTeacher<float> ft(path);
    EXPECT_EQ(ft.dim(), 16);
    auto served = ft.embed(px, grid);
    EXPECT_EQ(checksum(served.tokens), checksum(out.tokens));
    EXPECT_EQ(checksum(served.saliency), checksum(out.saliency));
    EXPECT_THROW(ft.embed(px, TokenGrid{4, 2, 2}), config_error);
    std::remove(path.c_str());
}

TEST(Alignment, SelfOrthogonalAndHandCases) {
    Tensor<float> teacher({1, 4, 2}, {1, 0, 0, 1, 1, 1, -1, 0});
    // student tokens at visible positions {0, 2}
    Tensor<float> student({1, 2, 2}, {1, 0, 1, 1});
    auto loss = semantic_alignment_loss(student, teacher, {0, 2});
    EXPECT_NEAR(loss.item(), -1.f, 1e-5f);  // both pairs identical directions

    Tensor<float> ortho({1, 2, 2}, {0, 1, 1, -1});
    auto zero = semantic_alignment_loss(ortho, teacher, {0, 2});
    EXPECT_NEAR(zero.item(), 0.f, 1e-6f);

    Tensor<float> s({1, 1, 2}, {1.f, 0.f});
    Tensor<float> t({1, 1, 2}, {float(1 / std::sqrt(2.0)), float(1 / std::sqrt(2.0))});
    EXPECT_NEAR(semantic_alignment_loss(s, t, {0}).item(), -0.7071f, 1e-4f);

    EXPECT_THROW(semantic_alignment_loss(student, teacher, {0}), contract_error);
    Tensor<float> wrong_dim({1, 2, 3});
    EXPECT_THROW(semantic_alignment_loss(wrong_dim, teacher, {0, 2}), shape_error);
}

TEST(Alignment, TeacherReceivesNoGradient) {
    Rng rng(4, "align");
    Tensor<double> student = Tensor<double>::randn({1, 3, 4}, rng);
    Tensor<double> teacher = Tensor<double>::randn({1, 5, 4}, rng);
    student.requires_grad = true;
    auto loss = semantic_alignment_loss(student, teacher, {0, 2, 4});
    backward(loss);
    EXPECT_TRUE(student.has_grad());
    EXPECT_FALSE(teacher.has_grad());
}

TEST(Alignment, ExactScaleInvariancePowerOfTwo) {
    Rng rng(5, "align-scale");
    Tensor<float> student = Tensor<float>::randn({1, 4, 8}, rng);
    Tensor<float> teacher = Tensor<float>::randn({1, 4, 8}, rng);
    auto base = semantic_alignment_loss(student, teacher, {0, 1, 2, 3});
    Tensor<float> scaled = student.clone();
    for (auto& v : scaled.data()) v *= 4.f;
    auto s = semantic_alignment_loss(scaled, teacher, {0, 1, 2, 3});
    EXPECT_EQ(base.item(), s.item());
}

TEST(Stage1Loss, WeightedSumAndAblationArms) {
    auto recon = Tensor<float>::scalar(0.5f);
    auto sem = Tensor<float>::scalar(-0.9f);
    EXPECT_NEAR(stage1_loss(recon, sem).item(), -0.4f, 1e-7f);
    // recon-only and alignment-only arms via weights
    Stage1Weights recon_only{1.0, 0.0};
    EXPECT_FLOAT_EQ(stage1_loss(recon, sem, recon_only).item(), 0.5f);
    Stage1Weights sem_only{0.0, 1.0};
    EXPECT_FLOAT_EQ(stage1_loss(recon, sem, sem_only).item(), -0.9f);
    auto nan = Tensor<float>::scalar(std::numeric_limits<float>::quiet_NaN());
    EXPECT_THROW(stage1_loss(nan, sem), contract_error);
}

TEST(LatentLoss, ClosedFormsAndGradient) {
    Tensor<double> target({2, 2, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    auto same = latent_prediction_loss(target, target);
    EXPECT_DOUBLE_EQ(same.item(), 0.0);

    Tensor<double> off = target.clone();
    for (auto& v : off.data()) v += 1.0;
    EXPECT_DOUBLE_EQ(latent_prediction_loss(off, target).item(), 1.0);

    // grad wrt pred = 2 (pred - target) / count
    Tensor<double> pred = target.clone();
    for (int64_t i = 0; i < pred.numel(); ++i) pred.ptr()[i] += 0.5 * double(i);
    pred.requires_grad = true;
    auto loss = latent_prediction_loss(pred, target);
    backward(loss);
    for (int64_t i = 0; i < pred.numel(); ++i)
        ASSERT_NEAR(pred.grad()[size_t(i)],
                    2.0 * (pred.ptr()[i] - target.ptr()[i]) / double(pred.numel()), 1e-12);

    // nonnegative, zero iff equal; alternative distances
    EXPECT_GT(latent_prediction_loss(pred, target).item(), 0.0);
    EXPECT_DOUBLE_EQ(latent_prediction_loss(target, target, LatentDistance::l1).item(), 0.0);
    EXPECT_NEAR(latent_prediction_loss(target, target, LatentDistance::neg_cosine).item(), -1.0,
                1e-9);
    EXPECT_EQ(latent_distance_from_string("l1"), LatentDistance::l1);
    EXPECT_THROW(latent_distance_from_string("cosine?"), config_error);
    Tensor<double> mis({2, 3});
    EXPECT_THROW(latent_prediction_loss(mis, target), shape_error);
}

TEST(Alignment, GradcheckThroughProjectionHead) {
    Rng rng(6, "align-gc");
    ParamStore<double> ps;
    ProjectionHead<double> head(6, 4, 2, ps, rng);
    Tensor<double> enc_out = Tensor<double>::randn({1, 3, 6}, rng);
    Tensor<double> teacher = Tensor<double>::randn({1, 5, 4}, rng);
    enc_out.requires_grad = true;
    std::vector<std::pair<std::string, Tensor<double>>> params = {{"enc_out", enc_out}};
    for (auto& [n, p] : ps.items()) params.emplace_back(n, p);
    auto loss_fn = [&] {
        return semantic_alignment_loss(head.project(enc_out), teacher, {1, 2, 4});
    };
    auto res = check_gradients<double>(loss_fn, params);
    EXPECT_LE(res.max_rel_err, 1e-3) << res.worst_param;
}
