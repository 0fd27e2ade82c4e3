// Forward semantics and gradients of the differentiable primitives.

#include <gtest/gtest.h>

#include <cmath>

#include "epd/gradcheck.hpp"
#include "epd/ops.hpp"

using namespace epd;

namespace {

template <class T>
ops::AttentionParams<T> make_attention_params(int64_t d, Rng& rng) {
    ops::AttentionParams<T> p;
    p.wq = init_weight<T>({d, d}, rng, 0.2);
    p.bq = init_weight<T>({d}, rng, 0.1);
    p.wkv = init_weight<T>({d, 2 * d}, rng, 0.2);
    p.bkv = init_weight<T>({2 * d}, rng, 0.1);
    p.wo = init_weight<T>({d, d}, rng, 0.2);
    p.bo = init_weight<T>({d}, rng, 0.1);
    p.wq.requires_grad = p.bq.requires_grad = true;
    p.wkv.requires_grad = p.bkv.requires_grad = true;
    p.wo.requires_grad = p.bo.requires_grad = true;
    return p;
}

}  // namespace

TEST(Linear, IdentityCase) {
    Tensor<float> x({1, 2}, {1.f, 2.f});
    Tensor<float> w({2, 2}, {1.f, 0.f, 0.f, 1.f});
    Tensor<float> b({2}, {0.f, 0.f});
    auto y = ops::linear(x, w, b);
    EXPECT_FLOAT_EQ(y.at({0, 0}), 1.f);
    EXPECT_FLOAT_EQ(y.at({0, 1}), 2.f);
}

TEST(Linear, HandMatrixMultiply) {
    Tensor<float> x({2, 2}, {1.f, 0.f, 0.f, 1.f});
    Tensor<float> w({2, 2}, {2.f, 0.f, 0.f, 3.f});
    Tensor<float> b({2}, {1.f, 1.f});
    auto y = ops::linear(x, w, b);
    EXPECT_FLOAT_EQ(y.at({0, 0}), 3.f);
    EXPECT_FLOAT_EQ(y.at({0, 1}), 1.f);
    EXPECT_FLOAT_EQ(y.at({1, 0}), 1.f);
    EXPECT_FLOAT_EQ(y.at({1, 1}), 4.f);
}

TEST(Linear, ShapeMismatchNamesBothShapes) {
    Tensor<float> x({1, 3});
    Tensor<float> w({2, 2});
    Tensor<float> b({2});
    try {
        ops::linear(x, w, b);
        FAIL() << "expected shape_error";
    } catch (const shape_error& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[1,3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[2,2]"), std::string::npos) << msg;
    }
}

TEST(Linear, Gradcheck) {
    Rng rng(11, "linear-gc");
    Tensor<double> x = Tensor<double>::randn({3, 4}, rng);
    Tensor<double> w = Tensor<double>::randn({4, 5}, rng);
    Tensor<double> b = Tensor<double>::randn({5}, rng);
    x.requires_grad = w.requires_grad = b.requires_grad = true;
    auto loss_fn = [&] { return ops::mse_loss(ops::linear(x, w, b), Tensor<double>({3, 5})); };
    auto res = check_gradients<double>(loss_fn, {{"x", x}, {"w", w}, {"b", b}});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(LayerNorm, ConstantRowNormalizesToZero) {
    Tensor<float> x({1, 4}, {3.f, 3.f, 3.f, 3.f});
    Tensor<float> gamma = init_ones<float>({4});
    Tensor<float> beta = init_zeros<float>({4});
    auto y = ops::layer_norm(x, gamma, beta, 1e-6f);
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(y.at({0, j}), 0.f, 1e-6f);
}

TEST(LayerNorm, TwoPointRow) {
    Tensor<float> x({1, 2}, {1.f, 3.f});
    auto y = ops::layer_norm(x, init_ones<float>({2}), init_zeros<float>({2}), 1e-6f);
    EXPECT_NEAR(y.at({0, 0}), -1.f, 1e-4f);
    EXPECT_NEAR(y.at({0, 1}), 1.f, 1e-4f);
}

TEST(LayerNorm, MeanAndVarianceInvariant) {
    Rng rng(5, "ln");
    Tensor<float> x = Tensor<float>::randn({8, 16}, rng, 2.0);
    auto y = ops::layer_norm(x, init_ones<float>({16}), init_zeros<float>({16}), 1e-6f);
    for (int r = 0; r < 8; ++r) {
        double mu = 0, var = 0;
        for (int j = 0; j < 16; ++j) mu += y.at({r, j});
        mu /= 16;
        for (int j = 0; j < 16; ++j) var += (y.at({r, j}) - mu) * (y.at({r, j}) - mu);
        var /= 16;
        EXPECT_LE(std::abs(mu), 1e-6);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(LayerNorm, EmptyAxisRejected) {
    EXPECT_THROW(Tensor<float>({1, 0}), shape_error);  // unrepresentable by construction
    Tensor<float> x({2, 3});
    EXPECT_THROW(ops::layer_norm(x, init_ones<float>({2}), init_zeros<float>({3}), 1e-6f),
                 shape_error);
}

TEST(LayerNorm, Gradcheck) {
    Rng rng(12, "ln-gc");
    Tensor<double> x = Tensor<double>::randn({4, 6}, rng);
    Tensor<double> gamma = Tensor<double>::randn({6}, rng, 0.5);
    Tensor<double> beta = Tensor<double>::randn({6}, rng, 0.5);
    x.requires_grad = gamma.requires_grad = beta.requires_grad = true;
    Tensor<double> target = Tensor<double>::randn({4, 6}, rng);
    auto loss_fn = [&] {
        return ops::mse_loss(ops::layer_norm(x, gamma, beta, 1e-6), target);
    };
    auto res = check_gradients<double>(loss_fn, {{"x", x}, {"gamma", gamma}, {"beta", beta}});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(Gelu, AnchorsAndMonotonicity) {
    Tensor<float> x({3}, {0.f, 10.f, -10.f});
    auto y = ops::gelu(x);
    EXPECT_FLOAT_EQ(y.at({0}), 0.f);
    EXPECT_NEAR(y.at({1}), 10.f, 1e-6f);
    EXPECT_NEAR(y.at({2}), 0.f, 1e-6f);
    // monotone on the grid right of the stationary point near -0.75
    float prev = -1.f;
    for (int i = 0; i <= 100; ++i) {
        Tensor<float> g({1}, {-0.7f + 0.06f * i});
        float v = ops::gelu(g).at({0});
        EXPECT_GE(v, prev - 1e-6f);
        prev = v;
    }
}

TEST(Gelu, Gradcheck) {
    Rng rng(13, "gelu-gc");
    Tensor<double> x = Tensor<double>::randn({17}, rng);
    x.requires_grad = true;
    auto loss_fn = [&] { return ops::sum_all(ops::gelu(x)); };
    auto res = check_gradients<double>(loss_fn, {{"x", x}});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(Softmax, UniformAndClosedForm) {
    Tensor<float> u({1, 4}, {2.f, 2.f, 2.f, 2.f});
    auto yu = ops::softmax_lastdim(u);
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(yu.at({0, j}), 0.25f, 1e-7f);

    Tensor<float> x({1, 2}, {0.f, std::log(3.f)});
    auto y = ops::softmax_lastdim(x);
    EXPECT_NEAR(y.at({0, 0}), 0.25f, 1e-6f);
    EXPECT_NEAR(y.at({0, 1}), 0.75f, 1e-6f);
}

TEST(Softmax, RowsSumToOneAndShiftInvariance) {
    Rng rng(6, "sm");
    Tensor<float> x = Tensor<float>::randn({16, 9}, rng, 3.0);
    auto y = ops::softmax_lastdim(x);
    for (int r = 0; r < 16; ++r) {
        double s = 0;
        for (int j = 0; j < 9; ++j) s += y.at({r, j});
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
    Tensor<float> shifted = x.clone();
    for (auto& v : shifted.data()) v += 5.5f;
    auto y2 = ops::softmax_lastdim(shifted);
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.ptr()[i], y2.ptr()[i], 1e-6f);
    // integer inputs + integer shift stay bit-exact
    Tensor<float> xi({1, 3}, {1.f, 2.f, 3.f});
    Tensor<float> xs({1, 3}, {3.f, 4.f, 5.f});
    auto a = ops::softmax_lastdim(xi), b = ops::softmax_lastdim(xs);
    for (int j = 0; j < 3; ++j) EXPECT_EQ(a.at({0, j}), b.at({0, j}));
}

TEST(Softmax, Gradcheck) {
    Rng rng(14, "sm-gc");
    Tensor<double> x = Tensor<double>::randn({3, 5}, rng);
    Tensor<double> t = Tensor<double>::randn({3, 5}, rng);
    x.requires_grad = true;
    auto loss_fn = [&] { return ops::mse_loss(ops::softmax_lastdim(x), t); };
    auto res = check_gradients<double>(loss_fn, {{"x", x}});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(Mhsa, SingleTokenIsValueProjection) {
    Rng rng(21, "mhsa1");
    const int64_t d = 6;
    auto p = make_attention_params<double>(d, rng);
    Tensor<double> x = Tensor<double>::randn({1, 1, d}, rng);
    auto y = ops::mhsa(x, p, 2);
    // attention over one token is identity weighting: out = Wo (Wv x + bv) + bo
    auto kv = ops::linear(x, p.wkv, p.bkv);
    auto v = ops::slice_lastdim(kv, d, d);
    auto expect = ops::linear(v, p.wo, p.bo);
    for (int64_t i = 0; i < d; ++i) EXPECT_NEAR(y.ptr()[i], expect.ptr()[i], 1e-12);
}

TEST(Mhsa, IdenticalTokensGetIdenticalRows) {
    Rng rng(22, "mhsa2");
    const int64_t d = 8;
    auto p = make_attention_params<float>(d, rng);
    Tensor<float> x({1, 2, d});
    for (int64_t j = 0; j < d; ++j) {
        x.at({0, 0, j}) = float(j) * 0.1f;
        x.at({0, 1, j}) = float(j) * 0.1f;
    }
    auto y = ops::mhsa(x, p, 4);
    for (int64_t j = 0; j < d; ++j) EXPECT_FLOAT_EQ(y.at({0, 0, j}), y.at({0, 1, j}));
}

TEST(Mhsa, HeadDivisibilityEnforced) {
    Rng rng(23, "mhsa3");
    auto p = make_attention_params<float>(6, rng);
    Tensor<float> x({1, 2, 6});
    EXPECT_THROW(ops::mhsa(x, p, 4), config_error);
}

TEST(Mhsa, ContentPermutationSymmetry) {
    // permuting tokens (no positional info) permutes outputs the same way
    Rng rng(24, "mhsa4");
    const int64_t d = 8, N = 5;
    auto p = make_attention_params<float>(d, rng);
    Tensor<float> x = Tensor<float>::randn({1, N, d}, rng);
    auto y = ops::mhsa(x, p, 2);
    std::vector<int64_t> perm = {3, 0, 4, 1, 2};
    Tensor<float> xp({1, N, d});
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < d; ++j) xp.at({0, i, j}) = x.at({0, perm[size_t(i)], j});
    auto yp = ops::mhsa(xp, p, 2);
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < d; ++j)
            EXPECT_NEAR(yp.at({0, i, j}), y.at({0, perm[size_t(i)], j}), 1e-5f);
}

TEST(Mhsa, Gradcheck) {
    Rng rng(25, "mhsa-gc");
    const int64_t d = 8;
    auto p = make_attention_params<double>(d, rng);
    Tensor<double> x = Tensor<double>::randn({1, 3, d}, rng);
    x.requires_grad = true;
    Tensor<double> target = Tensor<double>::randn({1, 3, d}, rng);
    auto loss_fn = [&] { return ops::mse_loss(ops::mhsa(x, p, 2), target); };
    auto res = check_gradients<double>(loss_fn, {{"x", x},
                                                 {"wq", p.wq},
                                                 {"bq", p.bq},
                                                 {"wkv", p.wkv},
                                                 {"bkv", p.bkv},
                                                 {"wo", p.wo},
                                                 {"bo", p.bo}});
    EXPECT_LE(res.max_rel_err, 1e-3) << res.worst_param;
}

TEST(CrossAttention, SingleContextToken) {
    Rng rng(31, "ca1");
    const int64_t d = 6;
    auto p = make_attention_params<double>(d, rng);
    Tensor<double> q = Tensor<double>::randn({1, 3, d}, rng);
    Tensor<double> ctx = Tensor<double>::randn({1, 1, d}, rng);
    auto y = ops::cross_attention(q, ctx, p, 3);
    // every query sees only the single context value
    auto kv = ops::linear(ctx, p.wkv, p.bkv);
    auto v = ops::slice_lastdim(kv, d, d);
    auto expect = ops::linear(v, p.wo, p.bo);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < d; ++j) EXPECT_NEAR(y.at({0, i, j}), expect.at({0, 0, j}), 1e-12);
}

TEST(CrossAttention, DuplicatedContextOrderInvariance) {
    Rng rng(32, "ca2");
    const int64_t d = 8;
    auto p = make_attention_params<float>(d, rng);
    Tensor<float> q = Tensor<float>::randn({1, 2, d}, rng);
    Tensor<float> c1({1, 2, d}), c2({1, 2, d});
    Rng cr(33, "ctx");
    Tensor<float> tok = Tensor<float>::randn({d}, cr);
    Tensor<float> tok2 = Tensor<float>::randn({d}, cr);
    for (int64_t j = 0; j < d; ++j) {
        c1.at({0, 0, j}) = tok.ptr()[j];
        c1.at({0, 1, j}) = tok2.ptr()[j];
        c2.at({0, 0, j}) = tok2.ptr()[j];
        c2.at({0, 1, j}) = tok.ptr()[j];
    }
    auto y1 = ops::cross_attention(q, c1, p, 2);
    auto y2 = ops::cross_attention(q, c2, p, 2);
    for (int64_t i = 0; i < y1.numel(); ++i) EXPECT_NEAR(y1.ptr()[i], y2.ptr()[i], 1e-5f);
}

TEST(CrossAttention, MismatchedDimsRejected) {
    Rng rng(34, "ca3");
    auto p = make_attention_params<float>(8, rng);
    Tensor<float> q({1, 2, 8});
    Tensor<float> ctx({2, 3, 8});
    EXPECT_THROW(ops::cross_attention(q, ctx, p, 2), shape_error);
}

TEST(CrossAttention, Gradcheck) {
    Rng rng(35, "ca-gc");
    const int64_t d = 8;
    auto p = make_attention_params<double>(d, rng);
    Tensor<double> q = Tensor<double>::randn({1, 2, d}, rng);
    Tensor<double> ctx = Tensor<double>::randn({1, 3, d}, rng);
    q.requires_grad = ctx.requires_grad = true;
    Tensor<double> target = Tensor<double>::randn({1, 2, d}, rng);
    auto loss_fn = [&] { return ops::mse_loss(ops::cross_attention(q, ctx, p, 2), target); };
    auto res = check_gradients<double>(
        loss_fn, {{"q", q}, {"ctx", ctx}, {"wq", p.wq}, {"wkv", p.wkv}, {"wo", p.wo}});
    EXPECT_LE(res.max_rel_err, 1e-3) << res.worst_param;
}

TEST(MlpBlock, ZeroWeightsGiveZero) {
    Tensor<float> x({2, 3}, {1.f, 2.f, 3.f, 4.f, 5.f, 6.f});
    auto y = ops::mlp_block(x, init_zeros<float>({3, 8}), init_zeros<float>({8}),
                            init_zeros<float>({8, 3}), init_zeros<float>({3}));
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_FLOAT_EQ(y.ptr()[i], 0.f);
}

TEST(MlpBlock, HandComputedTinyCase) {
    // d=2, hidden=1: y = w2 * gelu(x·w1 + b1) + b2
    Tensor<double> x({1, 2}, {1.0, -1.0});
    Tensor<double> w1({2, 1}, {2.0, 1.0});
    Tensor<double> b1({1}, {0.5});
    Tensor<double> w2({1, 2}, {1.0, -2.0});
    Tensor<double> b2({2}, {0.1, 0.2});
    auto y = ops::mlp_block(x, w1, b1, w2, b2);
    double pre = 1.0 * 2.0 + (-1.0) * 1.0 + 0.5;  // 1.5
    double act = pre * 0.5 * (1.0 + std::erf(pre / std::sqrt(2.0)));
    EXPECT_NEAR(y.at({0, 0}), act * 1.0 + 0.1, 1e-12);
    EXPECT_NEAR(y.at({0, 1}), act * -2.0 + 0.2, 1e-12);
}

TEST(MlpBlock, Gradcheck) {
    Rng rng(41, "mlp-gc");
    Tensor<double> x = Tensor<double>::randn({2, 4}, rng);
    Tensor<double> w1 = Tensor<double>::randn({4, 6}, rng, 0.3);
    Tensor<double> b1 = Tensor<double>::randn({6}, rng, 0.1);
    Tensor<double> w2 = Tensor<double>::randn({6, 4}, rng, 0.3);
    Tensor<double> b2 = Tensor<double>::randn({4}, rng, 0.1);
    x.requires_grad = w1.requires_grad = b1.requires_grad = true;
    w2.requires_grad = b2.requires_grad = true;
    Tensor<double> target = Tensor<double>::randn({2, 4}, rng);
    auto loss_fn = [&] { return ops::mse_loss(ops::mlp_block(x, w1, b1, w2, b2), target); };
    auto res = check_gradients<double>(
        loss_fn, {{"x", x}, {"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(SincosPositions, DeterministicBoundedDistinct) {
    auto a = ops::sincos_positions<float>(2, 2, 2, 12);
    auto b = ops::sincos_positions<float>(2, 2, 2, 12);
    for (int64_t i = 0; i < a.numel(); ++i) {
        EXPECT_EQ(a.ptr()[i], b.ptr()[i]);
        EXPECT_GE(a.ptr()[i], -1.f);
        EXPECT_LE(a.ptr()[i], 1.f);
    }
    // pairwise distinct rows on the 2x2x2 grid
    for (int64_t r = 0; r < 8; ++r)
        for (int64_t s = r + 1; s < 8; ++s) {
            bool same = true;
            for (int64_t j = 0; j < 12; ++j)
                if (a.at({r, j}) != a.at({s, j})) same = false;
            EXPECT_FALSE(same) << "rows " << r << " and " << s;
        }
    EXPECT_THROW(ops::sincos_positions<float>(2, 2, 2, 4), config_error);
    EXPECT_THROW(ops::sincos_positions<float>(2, 2, 2, 7), config_error);
}

TEST(GatherAssemble, RoundTripAndOverlapGuard) {
    Rng rng(51, "ga");
    Tensor<double> x = Tensor<double>::randn({2, 4, 3}, rng);
    std::vector<int64_t> vis = {0, 2};
    std::vector<int64_t> masked = {1, 3};
    auto v = ops::gather_rows(x, vis);
    Tensor<double> mt({3}, {9.0, 9.0, 9.0});
    auto full = ops::assemble_tokens(v, vis, mt, masked, 4);
    for (int64_t b = 0; b < 2; ++b) {
        for (int64_t j = 0; j < 3; ++j) {
            EXPECT_EQ(full.at({b, 0, j}), x.at({b, 0, j}));
            EXPECT_EQ(full.at({b, 2, j}), x.at({b, 2, j}));
            EXPECT_EQ(full.at({b, 1, j}), 9.0);
            EXPECT_EQ(full.at({b, 3, j}), 9.0);
        }
    }
    std::vector<int64_t> overlapping = {0, 2};
    EXPECT_THROW(ops::assemble_tokens(v, vis, mt, overlapping, 4), contract_error);
}

TEST(GatherAssemble, Gradcheck) {
    Rng rng(52, "ga-gc");
    Tensor<double> x = Tensor<double>::randn({1, 4, 3}, rng);
    Tensor<double> mt = Tensor<double>::randn({3}, rng);
    x.requires_grad = mt.requires_grad = true;
    std::vector<int64_t> vis = {1, 3}, masked = {0, 2};
    Tensor<double> target = Tensor<double>::randn({1, 4, 3}, rng);
    auto loss_fn = [&] {
        auto v = ops::gather_rows(x, vis);
        return ops::mse_loss(ops::assemble_tokens(v, vis, mt, masked, 4), target);
    };
    auto res = check_gradients<double>(loss_fn, {{"x", x}, {"mask_token", mt}});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(Losses, CosineHandCaseAndScaleInvariance) {
    Tensor<float> s({1, 2}, {1.f, 0.f});
    Tensor<float> t({1, 2}, {float(1 / std::sqrt(2.0)), float(1 / std::sqrt(2.0))});
    auto loss = ops::neg_mean_cosine(s, t);
    EXPECT_NEAR(loss.item(), -0.7071f, 1e-4f);

    // identical rows -> -1; orthogonal -> 0
    Tensor<float> a({1, 2}, {0.3f, -0.4f});
    EXPECT_NEAR(ops::neg_mean_cosine(a, a).item(), -1.f, 1e-5f);
    Tensor<float> b({1, 2}, {0.4f, 0.3f});
    EXPECT_NEAR(ops::neg_mean_cosine(a, b).item(), 0.f, 1e-6f);

    // power-of-two rescale of either side is exact
    Tensor<float> s2({1, 2}, {2.f, 0.f});
    EXPECT_EQ(ops::neg_mean_cosine(s, t).item(), ops::neg_mean_cosine(s2, t).item());

    // zero-norm row guarded, no NaN
    Tensor<float> z({1, 2}, {0.f, 0.f});
    auto guarded = ops::neg_mean_cosine(z, t);
    EXPECT_TRUE(std::isfinite(guarded.item()));
    EXPECT_NEAR(guarded.item(), 0.f, 1e-6f);
}

TEST(Losses, CosineGradcheck) {
    Rng rng(61, "cos-gc");
    Tensor<double> s = Tensor<double>::randn({3, 4}, rng);
    Tensor<double> t = Tensor<double>::randn({3, 4}, rng);
    s.requires_grad = t.requires_grad = true;
    auto loss_fn = [&] { return ops::neg_mean_cosine(s, t); };
    auto res = check_gradients<double>(loss_fn, {{"s", s}, {"t", t}});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(Losses, MseAndCrossEntropy) {
    Tensor<float> a({2, 2}, {1.f, 2.f, 3.f, 4.f});
    Tensor<float> b({2, 2}, {1.f, 2.f, 3.f, 4.f});
    EXPECT_FLOAT_EQ(ops::mse_loss(a, b).item(), 0.f);
    Tensor<float> c({2, 2}, {2.f, 3.f, 4.f, 5.f});
    EXPECT_FLOAT_EQ(ops::mse_loss(c, b).item(), 1.f);

    Tensor<double> logits({2, 3}, {5.0, 0.0, 0.0, 0.0, 5.0, 0.0});
    auto nll = ops::softmax_cross_entropy(logits, {0, 1});
    EXPECT_NEAR(nll.item(), -std::log(std::exp(5.0) / (std::exp(5.0) + 2.0)), 1e-9);
    EXPECT_THROW(ops::softmax_cross_entropy(logits, {0, 3}), data_error);
}

TEST(Losses, CrossEntropyGradcheck) {
    Rng rng(62, "ce-gc");
    Tensor<double> logits = Tensor<double>::randn({4, 5}, rng);
    logits.requires_grad = true;
    std::vector<int64_t> labels = {1, 4, 0, 2};
    auto loss_fn = [&] { return ops::softmax_cross_entropy(logits, labels); };
    auto res = check_gradients<double>(loss_fn, {{"logits", logits}});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(Losses, SmoothL1Gradcheck) {
    Rng rng(63, "sl1-gc");
    Tensor<double> a = Tensor<double>::randn({6}, rng, 2.0);
    Tensor<double> b = Tensor<double>::randn({6}, rng, 2.0);
    a.requires_grad = true;
    auto loss_fn = [&] { return ops::smooth_l1_loss(a, b, 1.0); };
    auto res = check_gradients<double>(loss_fn, {{"a", a}});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(Ops, ForwardDeterminismAndFiniteness) {
    Rng rng(71, "det");
    Tensor<float> x = Tensor<float>::randn({2, 5, 8}, rng, 2.0);
    auto p = make_attention_params<float>(8, rng);
    auto run = [&] {
        auto h = ops::layer_norm(x, init_ones<float>({8}), init_zeros<float>({8}), 1e-6f);
        return ops::mhsa(h, p, 2);
    };
    auto y1 = run(), y2 = run();
    for (int64_t i = 0; i < y1.numel(); ++i) {
        ASSERT_EQ(y1.ptr()[i], y2.ptr()[i]);
        ASSERT_TRUE(std::isfinite(y1.ptr()[i]));
    }
}
