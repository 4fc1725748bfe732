#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "attribution.hpp"
#include "synthlab.hpp"
#include "test_util.hpp"
#include "trainer.hpp"

using namespace xcoder;
using xcoder::testing::random_matrix;

namespace {

FeatureNorms norms_of(std::vector<std::string> models, std::vector<std::vector<double>> l1)
{
    return {std::move(models), std::move(l1)};
}

CrosscoderConfig config_k(std::size_t k, std::size_t d_model, std::size_t d_sparse)
{
    CrosscoderConfig c;
    const std::vector<std::string> ids{"base", "sft", "rl"};
    c.model_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k));
    c.d_model = d_model;
    c.d_sparse = d_sparse;
    return c;
}

CrosscoderParams<float> random_params(const CrosscoderConfig &c, Rng &rng)
{
    auto p = CrosscoderParams<float>::zeros(c.n_models(), c.d_model, c.d_sparse);
    p.for_each_tensor([&](Matrix<float> &m) {
        for (auto &v : m.flat()) v = static_cast<float>(rng.uniform(-1, 1));
    });
    return p;
}

RankedFeatures ranked(std::vector<std::size_t> idx, std::size_t top_n, std::string label = {})
{
    RankedFeatures r;
    r.label = std::move(label);
    r.top_n = top_n;
    double v = 1.0;
    for (auto k : idx) {
        r.entries.emplace_back(k, v);
        v -= 0.01;
    }
    return r;
}

} // namespace

TEST(DecoderNorms, ZeroColumnAndHandColumn)
{
    const auto c = config_k(2, 2, 2);
    auto p = CrosscoderParams<float>::zeros(2, 2, 2);
    p.dec[1](0, 1) = 3.0f;
    p.dec[1](1, 1) = -4.0f;
    const auto n = decoder_l1_norms(p, c);
    EXPECT_EQ(n.of("base")[0], 0.0);
    EXPECT_EQ(n.of("sft")[1], 7.0);
}

TEST(DecoderNorms, MatchBruteForceColumnSums)
{
    Rng rng(1);
    const auto c = config_k(2, 4, 6);
    const auto p = random_params(c, rng);
    const auto n = decoder_l1_norms(p, c);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t k = 0; k < 6; ++k) {
            double s = 0.0;
            for (std::size_t d = 0; d < 4; ++d) s += std::abs(static_cast<double>(p.dec[i](d, k)));
            EXPECT_NEAR(n.l1[i][k], s, 1e-12);
        }
    }
}

TEST(Nrn, HandExamples)
{
    const auto v = nrn(norms_of({"base", "tuned"}, {{2.0, 0.0, 3.0, 1.0, 0.0}, {2.0, 1.3, 1.0, 3.0, 0.0}}), "base", "tuned");
    EXPECT_DOUBLE_EQ(v.values[0], 0.5);
    EXPECT_DOUBLE_EQ(v.values[1], 1.0);
    EXPECT_DOUBLE_EQ(v.values[2], 0.25);
    EXPECT_DOUBLE_EQ(v.values[3], 0.75);
    EXPECT_FALSE(v.defined[4]);
    EXPECT_TRUE(v.defined[1]);
}

TEST(Nrn, UnknownModelThrows)
{
    EXPECT_THROW(nrn(norms_of({"base", "tuned"}, {{1.0}, {1.0}}), "base", "rl"), ModelSetMismatch);
}

TEST(Nrn, RangeAndScaleInvariance)
{
    Rng rng(2);
    const auto c = config_k(2, 5, 40);
    auto p = random_params(c, rng);
    const auto a = nrn(decoder_l1_norms(p, c), "base", "sft");
    for (double v : a.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    for (auto &d : p.dec) {
        for (auto &v : d.flat()) v *= 8.0f; // exact in binary
    }
    const auto b = nrn(decoder_l1_norms(p, c), "base", "sft");
    for (std::size_t k = 0; k < 40; ++k) EXPECT_NEAR(a.values[k], b.values[k], 1e-9);
}

TEST(Mas, HandExamples)
{
    const auto t = mas(norms_of({"base", "sft", "rl"}, {{1, 0, 2, 0}, {1, 0, 1, 0}, {1, 5, 1, 0}}), {"base", "sft", "rl"});
    for (double v : t.rows[0]) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    EXPECT_EQ(t.rows[1], (std::array<double, 3>{0.0, 0.0, 1.0}));
    EXPECT_EQ(t.rows[2], (std::array<double, 3>{0.5, 0.25, 0.25}));
    EXPECT_FALSE(t.defined[3]);
}

TEST(Mas, ColumnOrderFollowsRequest)
{
    const auto t = mas(norms_of({"base", "sft", "rl"}, {{2}, {1}, {1}}), {"rl", "base", "sft"});
    EXPECT_EQ(t.rows[0], (std::array<double, 3>{0.25, 0.5, 0.25}));
}

TEST(Mas, RequiresThreeModels)
{
    EXPECT_THROW(mas(norms_of({"base", "tuned"}, {{1.0}, {1.0}}), {"base", "tuned", "rl"}), ModelSetMismatch);
}

TEST(Mas, RowsOnSimplex)
{
    Rng rng(3);
    const auto c = config_k(3, 6, 200);
    const auto t = mas(decoder_l1_norms(random_params(c, rng), c), {"base", "sft", "rl"});
    for (const auto &r : t.rows) {
        EXPECT_NEAR(r[0] + r[1] + r[2], 1.0, 1e-9);
        for (double v : r) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(Shares, TwoModelSharesEqualOneMinusNrnAndNrn)
{
    Rng rng(4);
    const auto c = config_k(2, 6, 100);
    const auto n = decoder_l1_norms(random_params(c, rng), c);
    const auto s = attribution_shares(n, {"base", "sft"});
    const auto v = nrn(n, "base", "sft");
    for (std::size_t k = 0; k < 100; ++k) {
        EXPECT_NEAR(s.rows[k][0], 1.0 - v.values[k], 1e-9);
        EXPECT_NEAR(s.rows[k][1], v.values[k], 1e-9);
    }
}

TEST(Nrn, ZeroBaseNormGivesExactlyOne)
{
    const auto v = nrn(norms_of({"base", "tuned"}, {{0.0}, {1e-300}}), "base", "tuned");
    EXPECT_EQ(v.values[0], 1.0);
}

TEST(Rank, DefaultTopN)
{
    EXPECT_EQ(default_top_n, 50u);
}

TEST(Rank, EqualValuesKeepAscendingIndices)
{
    NrnVector v{"base", "tuned", std::vector<double>(80, 0.5), std::vector<bool>(80, true)};
    const auto r = rank_by_nrn(v);
    ASSERT_EQ(r.entries.size(), 50u);
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(r.entries[i].first, i);
    EXPECT_FALSE(r.short_list);
}

TEST(Rank, HandSort)
{
    NrnVector v{"base", "tuned", {0.9, 0.1, 0.95}, {true, true, true}};
    EXPECT_EQ(rank_by_nrn(v, 2).indices(), (std::vector<std::size_t>{2, 0}));
}

TEST(Rank, UndefinedExcludedAndShortFlagged)
{
    NrnVector v{"base", "tuned", {0.9, 0.0, 0.3}, {true, false, true}};
    const auto r = rank_by_nrn(v, 5);
    EXPECT_EQ(r.indices(), (std::vector<std::size_t>{0, 2}));
    EXPECT_TRUE(r.short_list);
    EXPECT_THROW(rank_by_nrn(v, 0), ConfigError);
}

TEST(Rank, DeterministicTotalOrder)
{
    Rng rng(5);
    std::vector<double> vals(300);
    for (auto &v : vals) v = std::round(rng.uniform() * 10) / 10; // many ties
    NrnVector v{"base", "tuned", vals, std::vector<bool>(300, true)};
    const auto r = rank_by_nrn(v, 300);
    for (std::size_t i = 1; i < r.entries.size(); ++i) {
        const auto &a = r.entries[i - 1];
        const auto &b = r.entries[i];
        EXPECT_TRUE(a.second > b.second || (a.second == b.second && a.first < b.first));
    }
}

TEST(Match, SelfMatchIsIdentity)
{
    Rng rng(6);
    const auto c = config_k(2, 8, 20);
    const auto p = random_params(c, rng);
    const auto m = match_features(p, c, p, c, "base");
    ASSERT_EQ(m.pairs.size(), 20u);
    for (const auto &pr : m.pairs) {
        EXPECT_EQ(pr.a, pr.b);
        EXPECT_NEAR(pr.cosine, 1.0, 1e-12);
    }
}

TEST(Match, RecoversPermutation)
{
    Rng rng(7);
    const auto c = config_k(2, 16, 30);
    const auto p = random_params(c, rng);
    std::vector<std::size_t> perm(30);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    const auto q = permute_features(p, perm);
    const auto m = match_features(p, c, q, c, "sft");
    for (std::size_t j = 0; j < 30; ++j) {
        ASSERT_TRUE(m.b_to_a[j].has_value());
        EXPECT_EQ(*m.b_to_a[j], perm[j]);
    }
}

TEST(Match, IsPartialInjectionAboveThreshold)
{
    Rng rng(8);
    const auto c = config_k(2, 4, 40);
    const auto a = random_params(c, rng);
    const auto b = random_params(c, rng);
    const auto m = match_features(a, c, b, c, "base", 0.5);
    std::vector<bool> used_a(40), used_b(40);
    for (const auto &pr : m.pairs) {
        EXPECT_GE(pr.cosine, 0.5);
        EXPECT_FALSE(used_a[pr.a]);
        EXPECT_FALSE(used_b[pr.b]);
        used_a[pr.a] = used_b[pr.b] = true;
    }
}

TEST(Match, MissingReferenceModelThrows)
{
    Rng rng(9);
    const auto c = config_k(2, 4, 4);
    const auto p = random_params(c, rng);
    EXPECT_THROW(match_features(p, c, p, c, "rl"), ModelSetMismatch);
}

TEST(Match, IndependentTrainingsAgreeOnPlantedAtoms)
{
    SynthConfig sc;
    Rng rng(sc.seed);
    const auto dict = gen_dictionary(sc, rng);
    const auto corpus = gen_dataset(dict, sc, rng).corpus;
    CrosscoderConfig c;
    c.model_ids = sc.model_ids;
    c.d_model = sc.d_model;
    c.d_sparse = 128;
    c.batch_size = 64;
    c.lr = 1e-3;
    c.norm_kind = NormKind::L2;
    c.total_tokens = 10 * sc.n_tokens;
    c.log_every = 1000;
    c.seed = 1;
    const auto a = train(c, corpus).final;
    c.seed = 2;
    const auto b = train(c, corpus).final;
    const auto m = match_features(a.params, a.config, b.params, b.config, "base", 0.9);
    const auto ra = recovery_eval(a.params, a.config, dict);
    const auto rb = recovery_eval(b.params, b.config, dict);
    const auto ub = detail::unit_columns(b.params.dec[0]);
    std::size_t matched = 0;
    for (std::size_t i = 0; i < ra.atoms.size(); ++i) {
        const auto &at = ra.atoms[i];
        if (at.cosine <= 0.9 || !m.a_to_b[at.feature]) {
            continue;
        }
        // The partner may be a different copy of the same atom.
        matched += dot(std::span<const double>(ub[*m.a_to_b[at.feature]]), dict.atoms.row(at.atom)) > 0.9;
    }
    EXPECT_GE(matched, static_cast<std::size_t>(std::ceil(0.8 * static_cast<double>(ra.atoms.size()))));
    EXPECT_GE(rb.by_role.at(AtomRole::shared).rate(), 0.8);
}

TEST(Overlap, IdenticalAndDisjointSets)
{
    const auto r0 = ranked({0, 1, 2}, 3, "c0");
    const auto r1 = ranked({3, 4, 5}, 3, "c1");
    std::vector<std::vector<FeatureMatching>> ident(2, std::vector<FeatureMatching>(2, FeatureMatching::identity(6)));
    const auto same = overlap_matrix({r0, r0}, ident);
    EXPECT_EQ(same.fractions[0][1], 1.0);
    EXPECT_EQ(same.mean_off_diagonal(), 1.0);
    const auto diff = overlap_matrix({r0, r1}, ident);
    EXPECT_EQ(diff.fractions[0][1], 0.0);
    EXPECT_EQ(diff.counts[0][0], 3u);
    EXPECT_EQ(diff.fractions[1][1], 1.0);
}

TEST(Overlap, UsesMatchingToTranslateIndices)
{
    const auto r0 = ranked({0, 1}, 2);
    const auto r1 = ranked({7, 9}, 2);
    FeatureMatching m;
    m.a_to_b.resize(10);
    m.b_to_a.resize(10);
    m.a_to_b[0] = 9;
    m.b_to_a[9] = 0;
    m.pairs.push_back({0, 9, 0.95});
    std::vector<std::vector<FeatureMatching>> table{{FeatureMatching::identity(10), m},
                                                    {m.reversed(), FeatureMatching::identity(10)}};
    const auto o = overlap_matrix({r0, r1}, table);
    EXPECT_EQ(o.counts[0][1], 1u);
    EXPECT_EQ(o.fractions[1][0], 0.5);
}

TEST(Overlap, InconsistentTopNRejected)
{
    std::vector<std::vector<FeatureMatching>> t(2, std::vector<FeatureMatching>(2));
    EXPECT_THROW(overlap_matrix({ranked({0}, 1), ranked({0}, 2)}, t), ConfigError);
}

TEST(RankShift, IdenticalRankingsHaveNoShiftOrBlank)
{
    const auto r = ranked({4, 2, 9}, 3);
    const auto t = rank_shift(r, r, FeatureMatching::identity(10));
    EXPECT_EQ(t.blank_count(), 0u);
    for (const auto &row : t.rows) EXPECT_EQ(row.shift, 0u);
}

TEST(RankShift, DroppedFeatureIsBlank)
{
    const auto before = ranked({1, 2, 3}, 3);
    const auto after = ranked({1, 2, 4}, 3);
    const auto t = rank_shift(before, after, FeatureMatching::identity(5));
    EXPECT_EQ(t.blank_count(), 2u); // 3 leaves, 4 enters
    EXPECT_TRUE(t.rows[2].blank);
    EXPECT_FALSE(t.rows[2].new_rank.has_value());
    EXPECT_TRUE(t.rows[3].blank);
    EXPECT_EQ(*t.rows[3].feature_new, 4u);
}

TEST(RankShift, SwappingRanksOneAndThree)
{
    const auto before = ranked({10, 11, 12}, 3);
    const auto after = ranked({12, 11, 10}, 3);
    const auto t = rank_shift(before, after, FeatureMatching::identity(13));
    ASSERT_EQ(t.rows.size(), 3u);
    EXPECT_EQ(t.rows[0].shift, 2u);
    EXPECT_EQ(t.rows[1].shift, 0u);
    EXPECT_EQ(t.rows[2].shift, 2u);
}

TEST(Histogram, AllMassInOneBin)
{
    const std::vector<double> v(7, 0.5);
    const auto h = histogram(v, {}, 10);
    EXPECT_EQ(h.counts[5], 7u);
    EXPECT_EQ(h.total(), 7u);
    EXPECT_EQ(h.edges.size(), 11u);
    EXPECT_EQ(h.edges.front(), 0.0);
    EXPECT_EQ(h.edges.back(), 1.0);
}

TEST(Histogram, EmptyInputGivesZeroCounts)
{
    const auto h = histogram(std::span<const double>(), {}, 4);
    EXPECT_EQ(h.counts, (std::vector<std::size_t>(4, 0)));
}

TEST(Histogram, UniformValuesSpreadEvenly)
{
    Rng rng(10);
    std::vector<double> v(1000);
    for (auto &x : v) x = rng.uniform();
    const auto h = histogram(v, {}, 10);
    for (auto c : h.counts) EXPECT_NEAR(static_cast<double>(c), 100.0, 40.0);
    EXPECT_EQ(h.total(), 1000u);
}

TEST(Histogram, UndefinedSkippedAndOneLandsInLastBin)
{
    NrnVector v{"base", "tuned", {1.0, 0.0, 0.3}, {true, true, false}};
    const auto h = histogram(v, 100);
    EXPECT_EQ(h.total(), 2u);
    EXPECT_EQ(h.counts[99], 1u);
    EXPECT_EQ(h.counts[0], 1u);
    EXPECT_THROW(histogram(v, 0), ConfigError);
}
