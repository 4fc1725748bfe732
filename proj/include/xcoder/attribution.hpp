#ifndef XCODER_ATTRIBUTION_HPP
#define XCODER_ATTRIBUTION_HPP

// Decoder-norm attribution of crosscoder features to models, and the
// checkpoint-dynamics analyses built on it (top-n overlap, rank shifts).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crosscoder.hpp"
#include "error.hpp"

namespace xcoder {

inline constexpr std::size_t default_top_n = 50;
inline constexpr double default_min_cosine = 0.7;

// Per-model L1 norms of every decoder column.
struct FeatureNorms {
    std::vector<std::string> models;
    std::vector<std::vector<double>> l1; // l1[model][feature]

    std::size_t d_sparse() const { return l1.empty() ? 0 : l1[0].size(); }

    const std::vector<double> &of(const std::string &model) const
    {
        for (std::size_t i = 0; i < models.size(); ++i) {
            if (models[i] == model) {
                return l1[i];
            }
        }
        throw ModelSetMismatch("no decoder norms for model '" + model + "'");
    }
};

template <typename T>
FeatureNorms decoder_l1_norms(const CrosscoderParams<T> &p, const CrosscoderConfig &config)
{
    validate_params(p, config);
    return {config.model_ids, decoder_column_norms(p, NormKind::L1)};
}

struct NrnVector {
    std::string base_id;
    std::string tuned_id;
    std::vector<double> values;
    std::vector<bool> defined; // false when both norms are zero

    std::size_t size() const noexcept { return values.size(); }
};

// NRN_k = |dec_k^T|_1 / (|dec_k^O|_1 + |dec_k^T|_1).
inline NrnVector nrn(const FeatureNorms &norms, const std::string &base_id, const std::string &tuned_id)
{
    const auto &base = norms.of(base_id);
    const auto &tuned = norms.of(tuned_id);
    NrnVector out{base_id, tuned_id, std::vector<double>(base.size(), 0.0),
                  std::vector<bool>(base.size(), false)};
    for (std::size_t k = 0; k < base.size(); ++k) {
        const double denom = base[k] + tuned[k];
        if (denom > 0.0) {
            out.values[k] = tuned[k] / denom;
            out.defined[k] = true;
        }
    }
    return out;
}

struct MasTable {
    std::array<std::string, 3> models; // column order (O, S, R)
    std::vector<std::array<double, 3>> rows;
    std::vector<bool> defined;

    std::size_t size() const noexcept { return rows.size(); }

    std::vector<double> column(std::size_t c) const
    {
        std::vector<double> out;
        out.reserve(rows.size());
        for (const auto &r : rows) {
            out.push_back(r[c]);
        }
        return out;
    }
};

// Each model's share of a feature's summed decoder norm, for any model count.
struct AttributionShares {
    std::vector<std::string> models;
    std::vector<std::vector<double>> rows; // rows[feature][model]
    std::vector<bool> defined;
};

inline AttributionShares attribution_shares(const FeatureNorms &norms, const std::vector<std::string> &order)
{
    std::vector<const std::vector<double> *> cols;
    for (const auto &m : order) {
        cols.push_back(&norms.of(m));
    }
    const std::size_t n = norms.d_sparse();
    AttributionShares out{order, std::vector<std::vector<double>>(n, std::vector<double>(order.size(), 0.0)),
                          std::vector<bool>(n, false)};
    for (std::size_t k = 0; k < n; ++k) {
        double denom = 0.0;
        for (const auto *c : cols) {
            denom += (*c)[k];
        }
        if (denom > 0.0) {
            for (std::size_t i = 0; i < cols.size(); ++i) {
                out.rows[k][i] = (*cols[i])[k] / denom;
            }
            out.defined[k] = true;
        }
    }
    return out;
}

// MAS_m = |dec_k^m|_1 / sum over {O, S, R} of |dec_k^i|_1.
inline MasTable mas(const FeatureNorms &norms, const std::array<std::string, 3> &order)
{
    if (norms.models.size() != 3) {
        throw ModelSetMismatch("MAS needs a three-model crosscoder, got "
                               + std::to_string(norms.models.size()) + " models");
    }
    const auto shares = attribution_shares(norms, {order.begin(), order.end()});
    MasTable out{order, std::vector<std::array<double, 3>>(shares.rows.size(), {0.0, 0.0, 0.0}),
                 shares.defined};
    for (std::size_t k = 0; k < shares.rows.size(); ++k) {
        const auto &r = shares.rows[k];
        out.rows[k] = {r[0], r[1], r[2]};
    }
    return out;
}

struct RankedFeatures {
    std::string label;
    std::size_t top_n = default_top_n;
    std::vector<std::pair<std::size_t, double>> entries; // (feature, value), best first
    bool short_list = false; // fewer than top_n defined features

    std::vector<std::size_t> indices() const
    {
        std::vector<std::size_t> out;
        for (const auto &e : entries) {
            out.push_back(e.first);
        }
        return out;
    }
    bool contains(std::size_t feature) const
    {
        return std::any_of(entries.begin(), entries.end(), [&](const auto &e) { return e.first == feature; });
    }
};

// Descending by value, ties by ascending index, undefined entries dropped.
inline RankedFeatures rank_values(std::span<const double> values, const std::vector<bool> &defined,
                                  std::size_t top_n, std::string label = {})
{
    if (top_n < 1) {
        throw ConfigError("top_n must be >= 1");
    }
    RankedFeatures out;
    out.label = std::move(label);
    out.top_n = top_n;
    for (std::size_t k = 0; k < values.size(); ++k) {
        if (defined.empty() || defined[k]) {
            out.entries.emplace_back(k, values[k]);
        }
    }
    std::sort(out.entries.begin(), out.entries.end(), [](const auto &a, const auto &b) {
        if (a.second != b.second) {
            return a.second > b.second;
        }
        return a.first < b.first;
    });
    if (out.entries.size() < top_n) {
        out.short_list = true;
    } else {
        out.entries.resize(top_n);
    }
    return out;
}

inline RankedFeatures rank_by_nrn(const NrnVector &v, std::size_t top_n = default_top_n,
                                  std::string label = {})
{
    return rank_values(v.values, v.defined, top_n, std::move(label));
}

struct MatchedPair {
    std::size_t a = 0;
    std::size_t b = 0;
    double cosine = 0.0;
};

// One-to-one correspondence between the features of two crosscoders.
struct FeatureMatching {
    double min_cosine = default_min_cosine;
    std::vector<MatchedPair> pairs; // in the order they were accepted
    std::vector<std::optional<std::size_t>> a_to_b;
    std::vector<std::optional<std::size_t>> b_to_a;

    static FeatureMatching identity(std::size_t n)
    {
        FeatureMatching m;
        m.min_cosine = 1.0;
        m.a_to_b.resize(n);
        m.b_to_a.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            m.pairs.push_back({k, k, 1.0});
            m.a_to_b[k] = k;
            m.b_to_a[k] = k;
        }
        return m;
    }

    FeatureMatching reversed() const
    {
        FeatureMatching r;
        r.min_cosine = min_cosine;
        r.a_to_b = b_to_a;
        r.b_to_a = a_to_b;
        for (const auto &p : pairs) {
            r.pairs.push_back({p.b, p.a, p.cosine});
        }
        return r;
    }
};

namespace detail {

// Unit-normalized decoder columns of one model, as rows; zero columns stay zero.
template <typename T>
std::vector<std::vector<double>> unit_columns(const Matrix<T> &dec)
{
    std::vector<std::vector<double>> cols(dec.cols(), std::vector<double>(dec.rows()));
    for (std::size_t d = 0; d < dec.rows(); ++d) {
        for (std::size_t k = 0; k < dec.cols(); ++k) {
            cols[k][d] = dec(d, k);
        }
    }
    for (auto &c : cols) {
        const double n = l2_norm(std::span<const double>(c));
        if (n > 0.0) {
            for (auto &v : c) {
                v /= n;
            }
        }
    }
    return cols;
}

} // namespace detail

// Greedy one-to-one matching on the cosine similarity of the reference
// model's decoder columns: highest-similarity pairs first, ties by (a, b),
// pairs below min_cosine discarded.
template <typename T>
FeatureMatching match_features(const CrosscoderParams<T> &params_a, const CrosscoderConfig &config_a,
                               const CrosscoderParams<T> &params_b, const CrosscoderConfig &config_b,
                               const std::string &reference_model_id,
                               double min_cosine = default_min_cosine)
{
    const auto &dec_a = params_a.dec[config_a.model_index(reference_model_id)];
    const auto &dec_b = params_b.dec[config_b.model_index(reference_model_id)];
    if (dec_a.rows() != dec_b.rows()) {
        throw InvalidShape("crosscoders have different d_model");
    }
    const auto ua = detail::unit_columns(dec_a);
    const auto ub = detail::unit_columns(dec_b);
    std::vector<MatchedPair> candidates;
    for (std::size_t a = 0; a < ua.size(); ++a) {
        for (std::size_t b = 0; b < ub.size(); ++b) {
            const double c = dot(std::span<const double>(ua[a]), std::span<const double>(ub[b]));
            if (c >= min_cosine) {
                candidates.push_back({a, b, c});
            }
        }
    }
    std::sort(candidates.begin(), candidates.end(), [](const MatchedPair &x, const MatchedPair &y) {
        if (x.cosine != y.cosine) {
            return x.cosine > y.cosine;
        }
        return x.a != y.a ? x.a < y.a : x.b < y.b;
    });
    FeatureMatching m;
    m.min_cosine = min_cosine;
    m.a_to_b.resize(ua.size());
    m.b_to_a.resize(ub.size());
    for (const auto &c : candidates) {
        if (!m.a_to_b[c.a] && !m.b_to_a[c.b]) {
            m.a_to_b[c.a] = c.b;
            m.b_to_a[c.b] = c.a;
            m.pairs.push_back(c);
        }
    }
    return m;
}

struct OverlapMatrix {
    std::vector<std::string> labels;
    std::size_t top_n = default_top_n;
    std::vector<std::vector<std::size_t>> counts;
    std::vector<std::vector<double>> fractions;

    double mean_off_diagonal() const
    {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            for (std::size_t j = 0; j < counts.size(); ++j) {
                if (i != j) {
                    s += fractions[i][j];
                    ++n;
                }
            }
        }
        return n ? s / static_cast<double>(n) : 0.0;
    }
};

// matchings[i][j] maps features of checkpoint i onto checkpoint j (i != j).
// Entry (i, j) counts top-n features of i whose match lies in j's top-n set.
inline OverlapMatrix overlap_matrix(const std::vector<RankedFeatures> &rankings,
                                    const std::vector<std::vector<FeatureMatching>> &matchings)
{
    const std::size_t c = rankings.size();
    if (c == 0) {
        return {};
    }
    OverlapMatrix out;
    out.top_n = rankings[0].top_n;
    for (const auto &r : rankings) {
        if (r.top_n != out.top_n) {
            throw ConfigError("rankings use different top_n");
        }
        out.labels.push_back(r.label);
    }
    if (matchings.size() != c) {
        throw ConfigError("need a C x C matching table");
    }
    out.counts.assign(c, std::vector<std::size_t>(c, 0));
    out.fractions.assign(c, std::vector<double>(c, 0.0));
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            std::size_t n = 0;
            if (i == j) {
                n = rankings[i].entries.size();
            } else {
                const auto &m = matchings[i].at(j);
                for (const auto &[k, v] : rankings[i].entries) {
                    if (k < m.a_to_b.size() && m.a_to_b[k] && rankings[j].contains(*m.a_to_b[k])) {
                        ++n;
                    }
                }
            }
            out.counts[i][j] = n;
            out.fractions[i][j] = static_cast<double>(n) / static_cast<double>(out.top_n);
        }
    }
    return out;
}

// Matches every ordered pair of crosscoders on the reference model's decoders.
template <typename T>
std::vector<std::vector<FeatureMatching>> all_pair_matchings(
    const std::vector<const CrosscoderParams<T> *> &params,
    const std::vector<const CrosscoderConfig *> &configs, const std::string &reference_model_id,
    double min_cosine = default_min_cosine)
{
    const std::size_t c = params.size();
    std::vector<std::vector<FeatureMatching>> out(c, std::vector<FeatureMatching>(c));
    for (std::size_t i = 0; i < c; ++i) {
        out[i][i] = FeatureMatching::identity(params[i]->d_sparse());
        for (std::size_t j = i + 1; j < c; ++j) {
            out[i][j] = match_features(*params[i], *configs[i], *params[j], *configs[j],
                                       reference_model_id, min_cosine);
            out[j][i] = out[i][j].reversed();
        }
    }
    return out;
}

struct RankShiftRow {
    std::optional<std::size_t> feature_old; // index in the earlier crosscoder
    std::optional<std::size_t> feature_new; // index in the later crosscoder
    std::optional<std::size_t> old_rank;    // 1-based, absent when outside top-n
    std::optional<std::size_t> new_rank;
    std::size_t shift = 0;
    bool blank = false; // in the top-n on one side only
};

struct RankShiftTable {
    std::string from_label;
    std::string to_label;
    std::vector<RankShiftRow> rows;

    std::size_t blank_count() const
    {
        return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const auto &r) { return r.blank; }));
    }
};

// Rank changes for every feature in the union of two top-n sets. Rows follow
// the earlier ranking, then features new to the later one in its order.
inline RankShiftTable rank_shift(const RankedFeatures &before, const RankedFeatures &after,
                                 const FeatureMatching &matching)
{
    if (before.top_n != after.top_n) {
        throw ConfigError("rank_shift needs equal top_n");
    }
    RankShiftTable t{before.label, after.label, {}};
    std::vector<bool> seen_new(after.entries.size(), false);
    auto rank_in_after = [&](std::size_t feature) -> std::optional<std::size_t> {
        for (std::size_t r = 0; r < after.entries.size(); ++r) {
            if (after.entries[r].first == feature) {
                return r;
            }
        }
        return std::nullopt;
    };
    for (std::size_t r = 0; r < before.entries.size(); ++r) {
        RankShiftRow row;
        row.feature_old = before.entries[r].first;
        row.old_rank = r + 1;
        const auto k = *row.feature_old;
        if (k < matching.a_to_b.size() && matching.a_to_b[k]) {
            row.feature_new = *matching.a_to_b[k];
            if (auto nr = rank_in_after(*row.feature_new)) {
                row.new_rank = *nr + 1;
                seen_new[*nr] = true;
            }
        }
        if (row.new_rank) {
            row.shift = *row.new_rank > *row.old_rank ? *row.new_rank - *row.old_rank
                                                      : *row.old_rank - *row.new_rank;
        } else {
            row.blank = true;
        }
        t.rows.push_back(row);
    }
    for (std::size_t r = 0; r < after.entries.size(); ++r) {
        if (seen_new[r]) {
            continue;
        }
        RankShiftRow row;
        row.feature_new = after.entries[r].first;
        row.new_rank = r + 1;
        const auto k = *row.feature_new;
        if (k < matching.b_to_a.size() && matching.b_to_a[k]) {
            row.feature_old = *matching.b_to_a[k];
        }
        row.blank = true;
        t.rows.push_back(row);
    }
    return t;
}

struct Histogram {
    std::vector<double> edges; // bin_count + 1 entries spanning [0, 1]
    std::vector<std::size_t> counts;

    std::size_t total() const
    {
        std::size_t n = 0;
        for (auto c : counts) {
            n += c;
        }
        return n;
    }
};

// Uniform bins on [0, 1]; the last bin is closed. Undefined entries skipped.
inline Histogram histogram(std::span<const double> values, const std::vector<bool> &defined,
                           std::size_t bin_count)
{
    if (bin_count < 1) {
        throw ConfigError("bin_count must be >= 1");
    }
    Histogram h;
    h.counts.assign(bin_count, 0);
    for (std::size_t b = 0; b <= bin_count; ++b) {
        h.edges.push_back(static_cast<double>(b) / static_cast<double>(bin_count));
    }
    for (std::size_t k = 0; k < values.size(); ++k) {
        if (!defined.empty() && !defined[k]) {
            continue;
        }
        const double v = std::clamp(values[k], 0.0, 1.0);
        auto bin = static_cast<std::size_t>(v * static_cast<double>(bin_count));
        h.counts[std::min(bin, bin_count - 1)] += 1;
    }
    return h;
}

inline Histogram histogram(const NrnVector &v, std::size_t bin_count)
{
    return histogram(v.values, v.defined, bin_count);
}

inline Histogram histogram(const MasTable &t, std::size_t column, std::size_t bin_count)
{
    return histogram(t.column(column), t.defined, bin_count);
}

} // namespace xcoder

#endif
