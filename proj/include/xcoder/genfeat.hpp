#ifndef XCODER_GENFEAT_HPP
#define XCODER_GENFEAT_HPP

// Generalization-controlling features: per-task scores on samples the base
// model gets wrong and the RL model gets right, thresholding, cross-task
// intersection, and intervention specs for a host runtime.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "actstore.hpp"
#include "crosscoder.hpp"
#include "error.hpp"
#include "json.hpp"

namespace xcoder {

inline constexpr double default_threshold_fraction = 0.2;
inline constexpr double default_amplify_value = 3.0;
inline constexpr int genfeat_schema_version = 1;

struct EvalRecord {
    std::string sample_id;
    std::string task;
    std::map<std::string, bool> correct_by_model;
};

inline nlohmann::json records_to_json(const std::vector<EvalRecord> &records)
{
    nlohmann::json arr = nlohmann::json::array();
    for (const auto &r : records) {
        arr.push_back({{"sample_id", r.sample_id}, {"task", r.task}, {"correct_by_model", r.correct_by_model}});
    }
    return {{"schema_version", genfeat_schema_version}, {"records", arr}};
}

inline std::vector<EvalRecord> records_from_json(const nlohmann::json &j)
{
    std::vector<EvalRecord> out;
    try {
        for (const auto &r : j.at("records")) {
            out.push_back({r.at("sample_id").get<std::string>(), r.at("task").get<std::string>(),
                           r.at("correct_by_model").get<std::map<std::string, bool>>()});
        }
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(std::string("eval records: ") + e.what());
    }
    return out;
}

struct CriticalSet {
    std::string task;
    std::vector<std::string> sample_ids;
};

// Per task (in order of first appearance): samples with base wrong, RL right.
inline std::vector<CriticalSet> select_critical(const std::vector<EvalRecord> &records,
                                                const std::string &base_id, const std::string &rl_id)
{
    std::vector<CriticalSet> out;
    auto slot = [&](const std::string &task) -> CriticalSet & {
        for (auto &c : out) {
            if (c.task == task) {
                return c;
            }
        }
        out.push_back({task, {}});
        return out.back();
    };
    for (const auto &r : records) {
        auto b = r.correct_by_model.find(base_id);
        auto l = r.correct_by_model.find(rl_id);
        if (b == r.correct_by_model.end() || l == r.correct_by_model.end()) {
            throw MissingLabel(r.sample_id);
        }
        auto &set = slot(r.task);
        if (!b->second && l->second) {
            set.sample_ids.push_back(r.sample_id);
        }
    }
    return out;
}

// Final-token activation rows for the given samples, in the given order.
inline Matrix<float> final_token_rows(const ActivationShard &shard, const std::vector<std::string> &sample_ids)
{
    if (!shard.token_meta) {
        throw FormatError("shard '" + shard.header.model_id + "' has no token metadata");
    }
    std::map<std::string, std::size_t> last_final;
    for (std::size_t r = 0; r < shard.token_meta->size(); ++r) {
        const auto &m = (*shard.token_meta)[r];
        if (m.is_final_token) {
            last_final[m.sample_id] = r;
        }
    }
    Matrix<float> out(sample_ids.size(), shard.d_model());
    for (std::size_t i = 0; i < sample_ids.size(); ++i) {
        auto it = last_final.find(sample_ids[i]);
        if (it == last_final.end()) {
            throw ConfigError("shard '" + shard.header.model_id + "' has no final-token row for sample '"
                              + sample_ids[i] + "'");
        }
        std::copy_n(shard.data.row(it->second).begin(), shard.d_model(), out.row(i).begin());
    }
    return out;
}

struct GenScoreVector {
    std::string task;
    std::vector<double> scores;
    std::size_t n_samples = 0;
};

// Score_k = mean over critical samples of f_k^RL(a_RL) - f_k^base(a_base),
// both single-branch encodings. Row x of each matrix is sample x.
template <typename T>
GenScoreVector gen_scores(const CrosscoderParams<T> &params, const CrosscoderConfig &config,
                          const Matrix<T> &base_acts, const Matrix<T> &rl_acts,
                          const std::string &base_id, const std::string &rl_id, std::string task)
{
    if (base_acts.rows() == 0 || rl_acts.rows() == 0) {
        throw EmptyCriticalSet("task '" + task + "' has no generalization-critical samples");
    }
    if (!base_acts.same_shape(rl_acts)) {
        throw InvalidShape("base and RL activation matrices differ in shape");
    }
    const auto f_base = encode_single(params, config, base_id, base_acts);
    const auto f_rl = encode_single(params, config, rl_id, rl_acts);
    GenScoreVector out{std::move(task), std::vector<double>(params.d_sparse(), 0.0), base_acts.rows()};
    for (std::size_t x = 0; x < base_acts.rows(); ++x) {
        const auto rb = f_base.row(x);
        const auto rr = f_rl.row(x);
        for (std::size_t k = 0; k < out.scores.size(); ++k) {
            out.scores[k] += static_cast<double>(rr[k]) - static_cast<double>(rb[k]);
        }
    }
    for (auto &s : out.scores) {
        s /= static_cast<double>(out.n_samples);
    }
    return out;
}

struct TaskFeatureSet {
    std::string task;
    double fraction = default_threshold_fraction;
    double threshold = 0.0;
    std::vector<std::size_t> features; // ascending
};

// Keeps features with Score_k > fraction * max_k Score_k; empty if max <= 0.
inline TaskFeatureSet threshold_features(const GenScoreVector &scores,
                                         double fraction = default_threshold_fraction)
{
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw ConfigError("threshold fraction must be in (0, 1]");
    }
    TaskFeatureSet out{scores.task, fraction, 0.0, {}};
    if (scores.scores.empty()) {
        return out;
    }
    const double mx = *std::max_element(scores.scores.begin(), scores.scores.end());
    out.threshold = fraction * mx;
    if (!(mx > 0.0)) {
        return out;
    }
    for (std::size_t k = 0; k < scores.scores.size(); ++k) {
        if (scores.scores[k] > out.threshold) {
            out.features.push_back(k);
        }
    }
    return out;
}

struct IntersectionResult {
    std::vector<std::string> tasks;
    std::vector<std::size_t> features; // ascending
    std::vector<std::vector<double>> overlap; // |A ∩ B| / min(|A|, |B|)
};

inline double set_overlap(const std::vector<std::size_t> &a, const std::vector<std::size_t> &b)
{
    const std::size_t denom = std::min(a.size(), b.size());
    if (denom == 0) {
        return 0.0;
    }
    std::vector<std::size_t> sa(a), sb(b), common;
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(common));
    return static_cast<double>(common.size()) / static_cast<double>(denom);
}

inline IntersectionResult intersect(const std::vector<TaskFeatureSet> &sets)
{
    if (sets.empty()) {
        throw ConfigError("intersect needs at least one task feature set");
    }
    IntersectionResult out;
    std::vector<std::size_t> acc(sets[0].features);
    std::sort(acc.begin(), acc.end());
    for (const auto &s : sets) {
        out.tasks.push_back(s.task);
        std::vector<std::size_t> cur(s.features), next;
        std::sort(cur.begin(), cur.end());
        std::set_intersection(acc.begin(), acc.end(), cur.begin(), cur.end(), std::back_inserter(next));
        acc = std::move(next);
    }
    out.features = std::move(acc);
    out.overlap.assign(sets.size(), std::vector<double>(sets.size(), 0.0));
    for (std::size_t i = 0; i < sets.size(); ++i) {
        for (std::size_t j = 0; j < sets.size(); ++j) {
            out.overlap[i][j] = set_overlap(sets[i].features, sets[j].features);
        }
    }
    return out;
}

enum class InterventionMode { zero, amplify };

inline std::string to_string(InterventionMode m) { return m == InterventionMode::zero ? "zero" : "amplify"; }

inline InterventionMode intervention_mode_from_string(const std::string &s)
{
    if (s == "zero") {
        return InterventionMode::zero;
    }
    if (s == "amplify") {
        return InterventionMode::amplify;
    }
    throw ConfigError("mode must be 'zero' or 'amplify', got '" + s + "'");
}

struct InterventionFeature {
    std::size_t index = 0;
    std::vector<float> enc_row;
    float enc_bias = 0.0f;
    std::vector<float> dec_col;
};

// Everything a host runtime needs to edit one model's residual stream:
//   f_k(a) = max(<enc_row_k, a> + enc_bias_k, 0)
//   a'     = a + sum_k (target_k - f_k(a)) * dec_col_k
// with target_k = 0 (zero) or value (amplify), all f_k taken on the unedited a.
struct InterventionSpec {
    std::string crosscoder_id;
    std::string model_id;
    std::uint32_t layer_index = 0;
    std::size_t d_model = 0;
    InterventionMode mode = InterventionMode::zero;
    std::optional<double> value;
    std::vector<InterventionFeature> features;
};

inline void validate_spec(const InterventionSpec &s)
{
    if (s.mode == InterventionMode::amplify && !s.value) {
        throw ConfigError("amplify intervention needs a clamp value");
    }
    if (s.mode == InterventionMode::zero && s.value) {
        throw ConfigError("zero intervention must not carry a clamp value");
    }
    for (const auto &f : s.features) {
        if (f.enc_row.size() != s.d_model || f.dec_col.size() != s.d_model) {
            throw InvalidShape("intervention feature " + std::to_string(f.index)
                               + " vectors do not have length d_model");
        }
    }
}

template <typename T>
InterventionSpec export_intervention(const CrosscoderParams<T> &params, const CrosscoderConfig &config,
                                     const std::vector<std::size_t> &features,
                                     const std::string &target_model_id, InterventionMode mode,
                                     double value = default_amplify_value,
                                     std::string crosscoder_id = "crosscoder",
                                     std::uint32_t layer_index = 0, double activation_scale = 1.0)
{
    if (!(activation_scale > 0.0)) {
        throw ConfigError("activation_scale must be positive");
    }
    if (features.empty()) {
        throw InvalidFeature("intervention needs at least one feature");
    }
    const std::size_t m = config.model_index(target_model_id);
    InterventionSpec spec;
    spec.crosscoder_id = std::move(crosscoder_id);
    spec.model_id = target_model_id;
    spec.layer_index = layer_index;
    spec.d_model = params.d_model();
    spec.mode = mode;
    if (mode == InterventionMode::amplify) {
        spec.value = value;
    }
    for (std::size_t k : features) {
        if (k >= params.d_sparse()) {
            throw InvalidFeature("feature index " + std::to_string(k) + " out of range (d_sparse "
                                 + std::to_string(params.d_sparse()) + ")");
        }
        InterventionFeature f;
        f.index = k;
        f.enc_bias = static_cast<float>(params.enc_bias(0, k));
        for (std::size_t d = 0; d < params.d_model(); ++d) {
            // Fold the dataset normalization in so the spec acts on raw residuals.
            f.enc_row.push_back(static_cast<float>(activation_scale * params.enc[m](k, d)));
            f.dec_col.push_back(static_cast<float>(params.dec[m](d, k) / activation_scale));
        }
        spec.features.push_back(std::move(f));
    }
    return spec;
}

inline double spec_feature_activation(const InterventionFeature &f, std::span<const float> a)
{
    const double pre = dot(std::span<const float>(f.enc_row), a) + static_cast<double>(f.enc_bias);
    return pre > 0.0 ? pre : 0.0;
}

// The additive edit the spec prescribes for one residual vector.
inline std::vector<double> patch_delta(const InterventionSpec &spec, std::span<const float> a)
{
    if (a.size() != spec.d_model) {
        throw InvalidShape("activation length does not match spec d_model");
    }
    const double target = spec.mode == InterventionMode::amplify ? *spec.value : 0.0;
    std::vector<double> delta(spec.d_model, 0.0);
    for (const auto &f : spec.features) {
        const double coef = target - spec_feature_activation(f, a);
        for (std::size_t d = 0; d < spec.d_model; ++d) {
            delta[d] += coef * static_cast<double>(f.dec_col[d]);
        }
    }
    return delta;
}

inline Matrix<float> apply_patch(const InterventionSpec &spec, const Matrix<float> &acts)
{
    Matrix<float> out = acts;
    for (std::size_t r = 0; r < acts.rows(); ++r) {
        const auto delta = patch_delta(spec, acts.row(r));
        auto row = out.row(r);
        for (std::size_t d = 0; d < row.size(); ++d) {
            row[d] = static_cast<float>(static_cast<double>(row[d]) + delta[d]);
        }
    }
    return out;
}

inline nlohmann::json spec_to_json(const InterventionSpec &s)
{
    validate_spec(s);
    nlohmann::json feats = nlohmann::json::array();
    for (const auto &f : s.features) {
        feats.push_back({{"index", f.index}, {"enc_row", f.enc_row}, {"enc_bias", f.enc_bias}, {"dec_col", f.dec_col}});
    }
    nlohmann::json j{{"schema_version", genfeat_schema_version},
                     {"crosscoder_id", s.crosscoder_id},
                     {"model_id", s.model_id},
                     {"layer_index", s.layer_index},
                     {"d_model", s.d_model},
                     {"mode", to_string(s.mode)},
                     {"features", feats}};
    if (s.value) {
        j["value"] = *s.value;
    }
    return j;
}

inline InterventionSpec spec_from_json(const nlohmann::json &j)
{
    InterventionSpec s;
    try {
        s.crosscoder_id = j.at("crosscoder_id").get<std::string>();
        s.model_id = j.at("model_id").get<std::string>();
        s.layer_index = j.at("layer_index").get<std::uint32_t>();
        s.d_model = j.at("d_model").get<std::size_t>();
        s.mode = intervention_mode_from_string(j.at("mode").get<std::string>());
        if (j.contains("value") && !j.at("value").is_null()) {
            s.value = j.at("value").get<double>();
        }
        for (const auto &f : j.at("features")) {
            s.features.push_back({f.at("index").get<std::size_t>(), f.at("enc_row").get<std::vector<float>>(),
                                  f.at("enc_bias").get<float>(), f.at("dec_col").get<std::vector<float>>()});
        }
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(std::string("intervention spec: ") + e.what());
    }
    validate_spec(s);
    return s;
}

} // namespace xcoder

#endif
