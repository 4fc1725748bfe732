#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "crosscoder.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace xcoder;
using xcoder::testing::random_matrix;

namespace {

CrosscoderConfig small_config(std::size_t k, std::size_t d_model, std::size_t d_sparse, NormKind kind = NormKind::L1)
{
    CrosscoderConfig c;
    const std::vector<std::string> ids{"base", "sft", "rl"};
    c.model_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k));
    c.d_model = d_model;
    c.d_sparse = d_sparse;
    c.norm_kind = kind;
    return c;
}

template <typename T>
CrosscoderParams<T> random_params(const CrosscoderConfig &c, Rng &rng)
{
    auto p = CrosscoderParams<T>::zeros(c.n_models(), c.d_model, c.d_sparse);
    p.for_each_tensor([&](Matrix<T> &m) {
        for (auto &v : m.flat()) v = static_cast<T>(rng.uniform(-0.5, 0.5));
    });
    return p;
}

template <typename T>
std::vector<Matrix<T>> random_acts(const CrosscoderConfig &c, std::size_t n, Rng &rng)
{
    std::vector<Matrix<T>> acts;
    for (std::size_t i = 0; i < c.n_models(); ++i) acts.push_back(random_matrix<T>(n, c.d_model, rng));
    return acts;
}

// Random f64 instance with every pre-activation and decoder entry away from
// the ReLU and |x| kinks.
struct GradInstance {
    CrosscoderParams<double> params;
    std::vector<Matrix<double>> acts;
};

GradInstance kink_free_instance(const CrosscoderConfig &c, std::size_t n, Rng &rng)
{
    GradInstance g{CrosscoderParams<double>::zeros(c.n_models(), c.d_model, c.d_sparse), {}};
    for (;;) {
        g.params.for_each_tensor([&](Matrix<double> &m) {
            for (auto &v : m.flat()) {
                const double mag = rng.uniform(0.05, 0.5);
                v = rng.bernoulli(0.5) ? mag : -mag;
            }
        });
        g.acts.clear();
        for (std::size_t i = 0; i < c.n_models(); ++i) {
            Matrix<double> a(n, c.d_model);
            for (auto &v : a.flat()) v = rng.normal();
            g.acts.push_back(std::move(a));
        }
        Matrix<double> pre;
        encode(g.params, std::span<const Matrix<double>>(g.acts), &pre);
        if (std::all_of(pre.flat().begin(), pre.flat().end(), [](double v) { return std::abs(v) > 1e-3; })) {
            return g;
        }
    }
}

double grad_check(const CrosscoderConfig &c, GradInstance &g)
{
    const auto acts = std::span<const Matrix<double>>(g.acts);
    const auto analytic = flatten(backward(g.params, c, acts).grads);
    auto theta = flatten(g.params);
    auto scratch = g.params;
    Rng rng(1);
    return finite_diff_check(
               [&](std::span<const double> th) {
                   unflatten(th, scratch);
                   return loss(scratch, c, acts).total;
               },
               std::span<double>(theta), analytic, theta.size(), 1e-6, rng)
        .max_rel_error;
}

} // namespace

TEST(Config, Defaults)
{
    CrosscoderConfig c;
    EXPECT_EQ(c.beta, 2.0);
    EXPECT_EQ(c.d_sparse, 32768u);
    EXPECT_EQ(c.lr, 1e-4);
    EXPECT_EQ(c.batch_size, 1024u);
    EXPECT_EQ(c.norm_kind, NormKind::L1);
}

TEST(Config, ValidationRejectsBadValues)
{
    auto c = small_config(2, 4, 8);
    EXPECT_NO_THROW(validate_config(c));
    auto bad = c;
    bad.model_ids = {"only"};
    EXPECT_THROW(validate_config(bad), ConfigError);
    bad = c;
    bad.model_ids = {"a", "a"};
    EXPECT_THROW(validate_config(bad), ConfigError);
    bad = c;
    bad.d_sparse = 3;
    EXPECT_THROW(validate_config(bad), ConfigError);
    bad = c;
    bad.beta = -1.0;
    EXPECT_THROW(validate_config(bad), ConfigError);
}

TEST(Config, JsonRoundTrip)
{
    auto c = small_config(3, 5, 9, NormKind::L2);
    c.seed = 17;
    c.total_tokens = 1234;
    EXPECT_EQ(config_from_json(config_to_json(c)), c);
}

TEST(Init, DecoderColumnsHaveNormPointOne)
{
    const auto c = small_config(2, 2, 4);
    Rng rng(3);
    const auto p = init_params<float>(c, rng);
    for (const auto &n : decoder_column_norms(p, NormKind::L2)) {
        for (double v : n) EXPECT_NEAR(v, 0.1, 1e-6);
    }
}

TEST(Init, EncoderIsDecoderTransposeAndBiasesZero)
{
    const auto c = small_config(3, 6, 12);
    Rng rng(4);
    const auto p = init_params<float>(c, rng);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(p.enc[i], transpose(p.dec[i]));
        EXPECT_EQ(p.dec_bias[i], Matrix<float>(1, 6));
    }
    EXPECT_EQ(p.enc_bias, Matrix<float>(1, 12));
}

TEST(Init, SameSeedSameParams)
{
    const auto c = small_config(2, 8, 16);
    Rng a(9), b(9);
    EXPECT_EQ(init_params<float>(c, a), init_params<float>(c, b));
}

TEST(Encode, ZeroInputZeroBiasGivesZero)
{
    const auto c = small_config(2, 3, 5);
    Rng rng(1);
    auto p = random_params<float>(c, rng);
    p.enc_bias.fill(0.0f);
    std::vector<Matrix<float>> acts(2, Matrix<float>(4, 3));
    EXPECT_EQ(encode(p, std::span<const Matrix<float>>(acts)), Matrix<float>(4, 5));
}

TEST(Encode, NegativePreActivationClampsToZero)
{
    const auto c = small_config(2, 1, 1);
    auto p = CrosscoderParams<float>::zeros(2, 1, 1);
    p.enc_bias(0, 0) = -5.0f;
    std::vector<Matrix<float>> acts(2, Matrix<float>(1, 1));
    EXPECT_EQ(encode(p, std::span<const Matrix<float>>(acts))(0, 0), 0.0f);
}

TEST(Encode, HandExample)
{
    auto p = CrosscoderParams<float>::zeros(2, 1, 1);
    p.enc[0](0, 0) = 2.0f;
    p.enc[1](0, 0) = 3.0f;
    p.enc_bias(0, 0) = -1.0f;
    std::vector<Matrix<float>> acts{Matrix<float>{{1.0f}}, Matrix<float>{{1.0f}}};
    EXPECT_EQ(encode(p, std::span<const Matrix<float>>(acts))(0, 0), 4.0f);
}

TEST(Encode, ModelCountMismatchThrows)
{
    const auto c = small_config(3, 2, 4);
    Rng rng(1);
    const auto p = random_params<float>(c, rng);
    std::vector<Matrix<float>> acts(2, Matrix<float>(1, 2));
    EXPECT_THROW(encode(p, std::span<const Matrix<float>>(acts)), ModelSetMismatch);
}

TEST(Encode, BatchModelOrderFollowsConfig)
{
    const auto c = small_config(2, 3, 5);
    Rng rng(2);
    const auto p = random_params<float>(c, rng);
    auto acts = random_acts<float>(c, 4, rng);
    AlignedBatch b;
    b.models = {"sft", "base"};
    b.acts = {acts[1], acts[0]};
    EXPECT_EQ(encode(p, c, b), encode(p, std::span<const Matrix<float>>(acts)));
    b.models = {"sft", "rl"};
    EXPECT_THROW(encode(p, c, b), ModelSetMismatch);
}

TEST(Encode, OutputIsNonNegative)
{
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const auto c = small_config(2 + rng.below(2), 4, 9);
        const auto p = random_params<float>(c, rng);
        const auto acts = random_acts<float>(c, 7, rng);
        const auto f = encode(p, std::span<const Matrix<float>>(acts));
        EXPECT_TRUE(std::all_of(f.flat().begin(), f.flat().end(), [](float v) { return v >= 0.0f; }));
    }
}

TEST(EncodeSingle, ZeroInputZeroBiasGivesZero)
{
    const auto c = small_config(2, 3, 5);
    Rng rng(1);
    auto p = random_params<float>(c, rng);
    p.enc_bias.fill(0.0f);
    EXPECT_EQ(encode_single(p, c, "sft", Matrix<float>(2, 3)), Matrix<float>(2, 5));
}

TEST(EncodeSingle, AgreesWithJointEncodeWhenOtherBranchesAreZero)
{
    Rng rng(7);
    for (std::size_t k : {2u, 3u}) {
        const auto c = small_config(k, 5, 11);
        const auto p = random_params<float>(c, rng);
        for (std::size_t m = 0; m < k; ++m) {
            std::vector<Matrix<float>> acts(k, Matrix<float>(6, 5));
            acts[m] = random_matrix(6, 5, rng);
            EXPECT_EQ(encode_single(p, c, c.model_ids[m], acts[m]), encode(p, std::span<const Matrix<float>>(acts)));
        }
    }
}

TEST(EncodeSingle, HandExample)
{
    const auto c = small_config(2, 2, 1);
    auto p = CrosscoderParams<float>::zeros(2, 2, 1);
    p.enc[0](0, 0) = 1.0f;
    p.enc[0](0, 1) = 2.0f;
    p.enc[1](0, 0) = 100.0f;
    p.enc_bias(0, 0) = 0.5f;
    EXPECT_EQ(encode_single(p, c, "base", Matrix<float>{{1.0f, 1.0f}})(0, 0), 3.5f);
}

TEST(EncodeSingle, UnknownModelThrows)
{
    const auto c = small_config(2, 2, 2);
    const auto p = CrosscoderParams<float>::zeros(2, 2, 2);
    EXPECT_THROW(encode_single(p, c, "rl", Matrix<float>(1, 2)), ModelSetMismatch);
}

TEST(Decode, ZeroCodeGivesBias)
{
    const auto c = small_config(2, 3, 4);
    Rng rng(1);
    const auto p = random_params<float>(c, rng);
    const auto out = decode(p, Matrix<float>(2, 4));
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t r = 0; r < 2; ++r) {
            for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(out[i](r, d), p.dec_bias[i](0, d));
        }
    }
}

TEST(Decode, OneHotGivesScaledColumnPlusBias)
{
    const auto c = small_config(2, 3, 4);
    Rng rng(2);
    const auto p = random_params<double>(c, rng);
    Matrix<double> f(1, 4);
    f(0, 2) = 1.5;
    const auto out = decode(p, f);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t d = 0; d < 3; ++d) {
            EXPECT_NEAR(out[i](0, d), 1.5 * p.dec[i](d, 2) + p.dec_bias[i](0, d), 1e-12);
        }
    }
}

TEST(Decode, MatchesDirectMatmul)
{
    const auto c = small_config(3, 4, 6);
    Rng rng(3);
    const auto p = random_params<double>(c, rng);
    const auto f = random_matrix<double>(5, 6, rng, 0, 2);
    const auto out = decode(p, f);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto ref = matmul(f, transpose(p.dec[i]));
        for (std::size_t r = 0; r < 5; ++r) {
            for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(out[i](r, d), ref(r, d) + p.dec_bias[i](0, d), 1e-12);
        }
    }
}

TEST(Decode, WidthMismatchThrows)
{
    const auto p = CrosscoderParams<float>::zeros(2, 3, 4);
    EXPECT_THROW(decode(p, Matrix<float>(1, 5)), InvalidShape);
}

TEST(Loss, PerfectTrivialReconstructionIsZero)
{
    const auto c = small_config(2, 3, 4);
    Rng rng(1);
    auto p = CrosscoderParams<float>::zeros(2, 3, 4);
    p.enc_bias.fill(-1.0f);
    const Matrix<float> a{{0.5f, -1.0f, 2.0f}};
    std::vector<Matrix<float>> acts{a, a};
    p.dec_bias = {a, a};
    EXPECT_EQ(loss(p, c, std::span<const Matrix<float>>(acts)).total, 0.0);
}

TEST(Loss, HandEvaluatedSparsityTerm)
{
    auto c = small_config(2, 1, 1);
    auto p = CrosscoderParams<double>::zeros(2, 1, 1);
    p.enc[0](0, 0) = 4.0; // f = 4 from a^(0) = 1
    p.dec[0](0, 0) = 1.0;
    p.dec[1](0, 0) = 3.0;
    // Biases chosen so the reconstruction equals the input exactly.
    std::vector<Matrix<double>> acts{Matrix<double>{{1.0}}, Matrix<double>{{0.0}}};
    p.dec_bias[0](0, 0) = 1.0 - 4.0;
    p.dec_bias[1](0, 0) = 0.0 - 12.0;
    const auto l = loss(p, c, std::span<const Matrix<double>>(acts));
    EXPECT_DOUBLE_EQ(l.sparsity, 16.0);
    EXPECT_DOUBLE_EQ(l.recon_total(), 0.0);
    EXPECT_DOUBLE_EQ(l.total, 2.0 * 16.0);
}

TEST(Loss, DecomposesIntoReconPlusBetaSparsity)
{
    Rng rng(5);
    for (auto kind : {NormKind::L1, NormKind::L2}) {
        auto c = small_config(3, 4, 8, kind);
        c.beta = 0.7;
        const auto p = random_params<double>(c, rng);
        const auto acts = random_acts<double>(c, 6, rng);
        const auto l = loss(p, c, std::span<const Matrix<double>>(acts));
        EXPECT_NEAR(l.total, l.recon_total() + c.beta * l.sparsity, 1e-12 * std::abs(l.total));
    }
}

TEST(Loss, ReconIsBatchMeanOfSquaredError)
{
    const auto c = small_config(2, 3, 4);
    Rng rng(6);
    const auto p = random_params<double>(c, rng);
    const auto acts = random_acts<double>(c, 5, rng);
    ForwardCache<double> cache;
    const auto l = loss(p, c, std::span<const Matrix<double>>(acts), &cache);
    for (std::size_t i = 0; i < 2; ++i) {
        double s = 0.0;
        for (std::size_t r = 0; r < 5; ++r) {
            for (std::size_t d = 0; d < 3; ++d) {
                const double e = acts[i](r, d) - cache.reconstructions[i](r, d);
                s += e * e;
            }
        }
        EXPECT_NEAR(l.recon_per_model[i], s / 5.0, 1e-12);
    }
    for (std::size_t x = 0; x < cache.features.size(); ++x) {
        EXPECT_EQ(cache.features.flat()[x], std::max(cache.pre_activation.flat()[x], 0.0));
    }
}

TEST(Loss, PermutationEquivariance)
{
    Rng rng(8);
    const auto c = small_config(3, 4, 10);
    const auto p = random_params<float>(c, rng);
    const auto acts = random_acts<float>(c, 8, rng);
    std::vector<std::size_t> perm(10);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    const auto q = permute_features(p, perm);
    const double a = loss(p, c, std::span<const Matrix<float>>(acts)).total;
    const double b = loss(q, c, std::span<const Matrix<float>>(acts)).total;
    EXPECT_NEAR(a, b, 1e-6 * std::abs(a));
}

TEST(Loss, NonFiniteInputThrows)
{
    const auto c = small_config(2, 2, 2);
    auto p = CrosscoderParams<float>::zeros(2, 2, 2);
    std::vector<Matrix<float>> acts{Matrix<float>{{INFINITY, 0.0f}}, Matrix<float>(1, 2)};
    EXPECT_THROW(loss(p, c, std::span<const Matrix<float>>(acts)), NonFiniteLoss);
}

TEST(Backward, ZeroAtPerfectReconstructionWithoutPenalty)
{
    auto c = small_config(2, 3, 4);
    c.beta = 0.0;
    Rng rng(2);
    auto p = random_params<double>(c, rng);
    p.enc_bias.fill(-100.0);
    const Matrix<double> a{{0.5, -1.0, 2.0}, {0.1, 0.2, 0.3}};
    std::vector<Matrix<double>> acts{a, a};
    // Both rows must reconstruct exactly, so use one row twice.
    acts = {Matrix<double>{{0.5, -1.0, 2.0}}, Matrix<double>{{0.5, -1.0, 2.0}}};
    p.dec_bias = acts;
    const auto g = backward(p, c, std::span<const Matrix<double>>(acts)).grads;
    g.for_each_tensor([](const Matrix<double> &m) {
        for (double v : m.flat()) EXPECT_EQ(v, 0.0);
    });
}

TEST(Backward, InactiveFeatureGetsNoEncoderGradient)
{
    const auto c = small_config(2, 3, 4);
    Rng rng(3);
    auto p = random_params<double>(c, rng);
    p.enc_bias(0, 1) = -1000.0;
    const auto acts = random_acts<double>(c, 5, rng);
    const auto g = backward(p, c, std::span<const Matrix<double>>(acts)).grads;
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(g.enc[i](1, d), 0.0);
    }
    EXPECT_EQ(g.enc_bias(0, 1), 0.0);
}

TEST(Backward, MatchesFiniteDifferencesThreeModels)
{
    Rng rng(21);
    for (auto kind : {NormKind::L1, NormKind::L2}) {
        const auto c = small_config(3, 8, 16, kind);
        auto g = kink_free_instance(c, 4, rng);
        EXPECT_LT(grad_check(c, g), 1e-4);
    }
}

TEST(Backward, MatchesFiniteDifferencesOnRandomInstances)
{
    Rng rng(22);
    for (int trial = 0; trial < 6; ++trial) {
        auto c = small_config(2 + rng.below(2), 2 + rng.below(4), 6, trial % 2 ? NormKind::L2 : NormKind::L1);
        c.beta = rng.uniform(0.0, 3.0);
        auto g = kink_free_instance(c, 1 + rng.below(4), rng);
        EXPECT_LT(grad_check(c, g), 1e-4);
    }
}

TEST(Backward, ZeroDecoderColumnGetsZeroPenaltySubgradient)
{
    auto c = small_config(2, 2, 2);
    c.beta = 1.0;
    auto p = CrosscoderParams<double>::zeros(2, 2, 2);
    p.enc[0](0, 0) = 1.0;
    p.enc_bias(0, 0) = 1.0; // feature 0 active, decoder columns zero
    std::vector<Matrix<double>> acts{Matrix<double>{{0.0, 0.0}}, Matrix<double>{{0.0, 0.0}}};
    const auto g = backward(p, c, std::span<const Matrix<double>>(acts)).grads;
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(g.dec[i](0, 0), 0.0);
        EXPECT_EQ(g.dec[i](1, 0), 0.0);
    }
}

TEST(DeadFeatures, FrequencyOfNeverAndAlwaysActive)
{
    const auto c = small_config(2, 2, 3);
    auto p = CrosscoderParams<float>::zeros(2, 2, 3);
    p.enc_bias(0, 0) = -1.0f;
    p.enc_bias(0, 1) = 1.0f;
    p.enc[0](2, 0) = 1.0f;
    AlignedBatch b;
    b.models = c.model_ids;
    b.acts = {Matrix<float>{{1, 0}, {-1, 0}, {2, 0}, {-2, 0}}, Matrix<float>(4, 2)};
    const std::vector<AlignedBatch> batches{b};
    const auto freq = dead_feature_stats(p, c, std::span<const AlignedBatch>(batches), 0.0);
    EXPECT_EQ(freq, (std::vector<double>{0.0, 1.0, 0.5}));
    EXPECT_THROW(dead_feature_stats(p, c, std::span<const AlignedBatch>(batches), -1.0), ConfigError);
}
