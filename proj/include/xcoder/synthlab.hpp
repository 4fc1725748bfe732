#ifndef XCODER_SYNTHLAB_HPP
#define XCODER_SYNTHLAB_HPP

// Synthetic ground truth: planted dictionaries of near-orthogonal atoms with
// per-model presence, activation datasets generated from them, synthetic
// generalization-critical samples, and recovery scoring of trained crosscoders.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "actstore.hpp"
#include "attribution.hpp"
#include "crosscoder.hpp"
#include "error.hpp"
#include "genfeat.hpp"
#include "json.hpp"
#include "rng.hpp"

namespace xcoder {

enum class AtomRole { shared, base_only, sft_specific, rl_specific, generalization };

inline constexpr std::array<AtomRole, 5> all_roles = {AtomRole::shared, AtomRole::base_only, AtomRole::sft_specific,
                                                      AtomRole::rl_specific, AtomRole::generalization};

inline std::string to_string(AtomRole r)
{
    switch (r) {
    case AtomRole::shared: return "shared";
    case AtomRole::base_only: return "base_only";
    case AtomRole::sft_specific: return "sft_specific";
    case AtomRole::rl_specific: return "rl_specific";
    case AtomRole::generalization: return "generalization";
    }
    return "?";
}

inline AtomRole atom_role_from_string(const std::string &s)
{
    for (auto r : all_roles) {
        if (to_string(r) == s) {
            return r;
        }
    }
    throw ConfigError("unknown atom role '" + s + "'");
}

struct SynthConfig {
    std::vector<std::string> model_ids{"base", "tuned"}; // model_ids[0] is the base model
    std::string sft_model;  // empty: model_ids[1] when K >= 2 and rl_model differs
    std::string rl_model;   // empty: model_ids[2] when K == 3
    std::size_t d_model = 64;
    std::size_t n_shared = 32;
    std::size_t n_base_only = 0;
    std::size_t n_sft_specific = 0;
    std::size_t n_rl_specific = 0;
    std::size_t n_generalization = 0;
    std::size_t n_tokens = 10000;
    std::size_t tokens_per_sample = 16;
    double firing_rate = 0.05;
    double magnitude_min = 0.5;
    double magnitude_max = 2.0;
    double noise_sigma = 0.0;
    double turnover_rate = 0.0;   // fraction of specific atoms replaced per pseudo-checkpoint
    std::size_t n_checkpoints = 1;
    double max_abs_cosine = 0.3;
    std::size_t max_retries = 2000;
    // Generalization-critical sample generation.
    std::size_t n_tasks = 0;
    std::size_t critical_per_task = 200;
    std::size_t noncritical_per_task = 0;
    std::size_t distractors_per_task = 2;
    bool normalize = true;
    std::size_t scale_sample_size = 100000;
    std::uint64_t seed = 0;
};

inline void resolve_roles(SynthConfig &c)
{
    if (c.model_ids.size() < 2 || c.model_ids.size() > 3) {
        throw ConfigError("synthetic data supports 2 or 3 models");
    }
    if (c.model_ids.size() == 3) {
        if (c.sft_model.empty()) c.sft_model = c.model_ids[1];
        if (c.rl_model.empty()) c.rl_model = c.model_ids[2];
    } else if (c.sft_model.empty() && c.rl_model.empty()) {
        c.sft_model = c.model_ids[1];
    }
    auto known = [&](const std::string &m) {
        return m.empty() || std::find(c.model_ids.begin(), c.model_ids.end(), m) != c.model_ids.end();
    };
    if (!known(c.sft_model) || !known(c.rl_model)) {
        throw ConfigError("sft_model/rl_model must be listed in model_ids");
    }
    if ((c.n_sft_specific > 0 && c.sft_model.empty()) || ((c.n_rl_specific > 0 || c.n_generalization > 0) && c.rl_model.empty())) {
        throw ConfigError("specific atoms requested for a model role that is not configured");
    }
    if (!(c.firing_rate > 0.0 && c.firing_rate < 1.0)) {
        throw ConfigError("firing_rate must be in (0, 1)");
    }
    if (!(c.noise_sigma >= 0.0) || c.magnitude_min > c.magnitude_max || c.magnitude_min < 0.0) {
        throw ConfigError("invalid noise or magnitude settings");
    }
    if (c.n_checkpoints < 1 || !(c.turnover_rate >= 0.0 && c.turnover_rate <= 1.0)) {
        throw ConfigError("invalid turnover settings");
    }
    if (c.n_tasks > 0 && c.n_shared < c.n_tasks * c.distractors_per_task) {
        throw ConfigError("not enough shared atoms to serve as task distractors");
    }
}

// Atoms replaced per pseudo-checkpoint step for a specific role of size n.
inline std::size_t turnover_per_step(const SynthConfig &c, std::size_t n)
{
    return static_cast<std::size_t>(std::lround(c.turnover_rate * static_cast<double>(n)));
}

struct GroundTruthDictionary {
    std::vector<std::string> model_ids;
    Matrix<double> atoms; // n_atoms x d_model, unit rows
    std::vector<AtomRole> roles;
    std::map<std::string, std::vector<double>> presence; // at pseudo-checkpoint 0
    std::vector<double> firing_rate;

    std::size_t n_atoms() const noexcept { return atoms.rows(); }

    std::vector<std::size_t> atoms_with_role(AtomRole r) const
    {
        std::vector<std::size_t> out;
        for (std::size_t a = 0; a < roles.size(); ++a) {
            if (roles[a] == r) {
                out.push_back(a);
            }
        }
        return out;
    }
};

// Rejection-samples sphere-uniform atoms until every pair has |cos| below
// config.max_abs_cosine. Roles are laid out in all_roles order; specific
// roles include their turnover reserve after the initially active atoms.
inline GroundTruthDictionary gen_dictionary(SynthConfig config, Rng &rng)
{
    resolve_roles(config);
    const auto n_sft = config.n_sft_specific + turnover_per_step(config, config.n_sft_specific) * (config.n_checkpoints - 1);
    const auto n_rl = config.n_rl_specific + turnover_per_step(config, config.n_rl_specific) * (config.n_checkpoints - 1);
    const std::array<std::size_t, 5> counts = {config.n_shared, config.n_base_only, n_sft, n_rl, config.n_generalization};

    GroundTruthDictionary g;
    g.model_ids = config.model_ids;
    std::size_t total = 0;
    for (std::size_t r = 0; r < counts.size(); ++r) {
        g.roles.insert(g.roles.end(), counts[r], all_roles[r]);
        total += counts[r];
    }
    const std::size_t d = config.d_model;
    g.atoms = Matrix<double>(total, d);
    std::vector<double> v(d);
    for (std::size_t a = 0; a < total; ++a) {
        bool ok = false;
        for (std::size_t attempt = 0; attempt < config.max_retries && !ok; ++attempt) {
            double n2 = 0.0;
            for (auto &x : v) {
                x = rng.normal();
                n2 += x * x;
            }
            const double inv = 1.0 / std::sqrt(n2);
            for (auto &x : v) {
                x *= inv;
            }
            ok = true;
            for (std::size_t b = 0; b < a && ok; ++b) {
                ok = std::abs(dot(std::span<const double>(v), g.atoms.row(b))) < config.max_abs_cosine;
            }
        }
        if (!ok) {
            throw DictionaryInfeasible("could not place atom " + std::to_string(a) + " of " + std::to_string(total)
                                       + " in d_model=" + std::to_string(d) + " with |cos| < "
                                       + std::to_string(config.max_abs_cosine));
        }
        std::copy(v.begin(), v.end(), g.atoms.row(a).begin());
    }

    g.firing_rate.assign(total, config.firing_rate);
    for (const auto &m : config.model_ids) {
        g.presence[m].assign(total, 0.0);
    }
    std::size_t sft_seen = 0, rl_seen = 0;
    for (std::size_t a = 0; a < total; ++a) {
        switch (g.roles[a]) {
        case AtomRole::shared:
            for (auto &[m, p] : g.presence) p[a] = 1.0;
            break;
        case AtomRole::base_only:
            g.presence[config.model_ids[0]][a] = 1.0;
            break;
        case AtomRole::sft_specific:
            g.presence[config.sft_model][a] = sft_seen++ < config.n_sft_specific ? 1.0 : 0.0;
            break;
        case AtomRole::rl_specific:
            g.presence[config.rl_model][a] = rl_seen++ < config.n_rl_specific ? 1.0 : 0.0;
            break;
        case AtomRole::generalization:
            g.presence[config.rl_model][a] = 1.0;
            break;
        }
    }
    return g;
}

using PresenceMap = std::map<std::string, std::vector<double>>;

// Presence per pseudo-checkpoint: at every step, turnover_per_step atoms of
// each specific role are dropped at random and replaced by unused reserve atoms.
inline std::vector<PresenceMap> turnover_sequence(const GroundTruthDictionary &dict, SynthConfig config, Rng &rng)
{
    resolve_roles(config);
    std::vector<PresenceMap> seq{dict.presence};
    struct Track {
        AtomRole role;
        std::string model;
        std::size_t n_active;
    };
    std::vector<Track> tracks;
    if (!config.sft_model.empty()) tracks.push_back({AtomRole::sft_specific, config.sft_model, config.n_sft_specific});
    if (!config.rl_model.empty()) tracks.push_back({AtomRole::rl_specific, config.rl_model, config.n_rl_specific});
    std::vector<std::vector<std::size_t>> active(tracks.size()), reserve(tracks.size());
    for (std::size_t t = 0; t < tracks.size(); ++t) {
        const auto ids = dict.atoms_with_role(tracks[t].role);
        const std::size_t n = std::min(tracks[t].n_active, ids.size());
        active[t].assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
        reserve[t].assign(ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end());
    }
    for (std::size_t c = 1; c < config.n_checkpoints; ++c) {
        PresenceMap next = seq.back();
        for (std::size_t t = 0; t < tracks.size(); ++t) {
            const std::size_t swaps = std::min(turnover_per_step(config, tracks[t].n_active), reserve[t].size());
            auto &act = active[t];
            for (std::size_t s = 0; s < swaps; ++s) {
                // Partial Fisher-Yates: pick one not-yet-replaced active slot.
                const std::size_t j = s + rng.below(act.size() - s);
                std::swap(act[s], act[j]);
                next[tracks[t].model][act[s]] = 0.0;
                act[s] = reserve[t].front();
                reserve[t].erase(reserve[t].begin());
                next[tracks[t].model][act[s]] = 1.0;
            }
        }
        seq.push_back(std::move(next));
    }
    return seq;
}

struct SynthDataset {
    std::shared_ptr<Dataset> corpus;                 // training tokens, normalized when configured
    std::vector<EvalRecord> eval_records;            // empty unless n_tasks > 0
    std::vector<ActivationShard> final_token_shards; // one per model, one row per eval sample (raw scale)
    std::map<std::string, std::vector<std::size_t>> task_distractors;
};

namespace detail {

inline void accumulate_atom(std::vector<double> &out, const Matrix<double> &atoms, std::size_t a, double w)
{
    const auto row = atoms.row(a);
    for (std::size_t d = 0; d < out.size(); ++d) {
        out[d] += w * row[d];
    }
}

struct Firing {
    std::size_t atom;
    double magnitude;
};

inline void emit_token(const GroundTruthDictionary &dict, const PresenceMap &presence, const std::vector<std::string> &models,
                       const std::vector<Firing> &fired, double noise_sigma, Rng &rng,
                       std::vector<Matrix<float>> &dst, std::size_t row)
{
    std::vector<double> v(dict.atoms.cols());
    for (std::size_t i = 0; i < models.size(); ++i) {
        std::fill(v.begin(), v.end(), 0.0);
        const auto &pres = presence.at(models[i]);
        for (const auto &f : fired) {
            if (pres[f.atom] != 0.0) {
                accumulate_atom(v, dict.atoms, f.atom, f.magnitude * pres[f.atom]);
            }
        }
        if (noise_sigma > 0.0) {
            for (auto &x : v) {
                x += noise_sigma * rng.normal();
            }
        }
        auto out = dst[i].row(row);
        for (std::size_t d = 0; d < v.size(); ++d) {
            out[d] = static_cast<float>(v[d]);
        }
    }
}

} // namespace detail

// Generates the training corpus (and, when config.n_tasks > 0, evaluation
// samples) from a dictionary. `presence` overrides the dictionary's presence,
// e.g. one entry of a turnover_sequence.
inline SynthDataset gen_dataset(const GroundTruthDictionary &dict, SynthConfig config, Rng &rng,
                                const PresenceMap *presence = nullptr)
{
    resolve_roles(config);
    const PresenceMap &pres = presence ? *presence : dict.presence;
    const auto &models = config.model_ids;
    const std::size_t d = dict.atoms.cols();
    const std::size_t n_atoms = dict.n_atoms();

    SynthDataset out;
    out.corpus = std::make_shared<Dataset>();
    out.corpus->models = models;
    out.corpus->source_tags = {"synthetic"};
    std::vector<Matrix<float>> acts(models.size(), Matrix<float>(config.n_tokens, d));
    std::vector<TokenMeta> meta(config.n_tokens);
    std::vector<detail::Firing> fired;
    const std::size_t seq = std::max<std::size_t>(1, config.tokens_per_sample);
    for (std::size_t t = 0; t < config.n_tokens; ++t) {
        fired.clear();
        for (std::size_t a = 0; a < n_atoms; ++a) {
            if (rng.bernoulli(dict.firing_rate[a])) {
                fired.push_back({a, rng.uniform(config.magnitude_min, config.magnitude_max)});
            }
        }
        detail::emit_token(dict, pres, models, fired, config.noise_sigma, rng, acts, t);
        meta[t] = {"seq" + std::to_string(t / seq), static_cast<std::int64_t>(t % seq), t % seq == seq - 1 || t + 1 == config.n_tokens};
    }
    std::vector<ActivationShard> group;
    for (std::size_t i = 0; i < models.size(); ++i) {
        group.push_back(make_shard(models[i], std::move(acts[i]), meta));
    }
    out.corpus->groups.push_back(std::move(group));
    out.corpus->scales.assign(models.size(), 1.0);
    if (config.normalize) {
        apply_normalization(*out.corpus, compute_normalization(*out.corpus, config.scale_sample_size));
    }

    if (config.n_tasks == 0) {
        return out;
    }
    // Evaluation samples: one final-token vector per sample and model.
    const auto shared = dict.atoms_with_role(AtomRole::shared);
    const std::size_t per_task = config.critical_per_task + config.noncritical_per_task;
    const std::size_t n_eval = config.n_tasks * per_task;
    std::vector<Matrix<float>> eval(models.size(), Matrix<float>(n_eval, d));
    std::vector<TokenMeta> eval_meta;
    const std::string base = models[0];
    std::size_t row = 0;
    for (std::size_t task = 0; task < config.n_tasks; ++task) {
        const std::string name = "task" + std::to_string(task);
        std::vector<std::size_t> distractors(shared.begin() + static_cast<std::ptrdiff_t>(task * config.distractors_per_task),
                                             shared.begin() + static_cast<std::ptrdiff_t>((task + 1) * config.distractors_per_task));
        out.task_distractors[name] = distractors;
        for (std::size_t j = 0; j < per_task; ++j, ++row) {
            const bool critical = j < config.critical_per_task;
            fired.clear();
            for (std::size_t a = 0; a < n_atoms; ++a) {
                const bool forced = std::find(distractors.begin(), distractors.end(), a) != distractors.end()
                                    || (critical && dict.roles[a] == AtomRole::generalization);
                const bool background = dict.roles[a] != AtomRole::generalization && rng.bernoulli(dict.firing_rate[a]);
                if (forced || background) {
                    fired.push_back({a, rng.uniform(config.magnitude_min, config.magnitude_max)});
                }
            }
            detail::emit_token(dict, pres, models, fired, config.noise_sigma, rng, eval, row);
            EvalRecord rec;
            rec.task = name;
            rec.sample_id = name + (critical ? "/critical" : "/other") + std::to_string(j);
            for (const auto &m : models) {
                // Non-critical samples alternate between "both right" and "both wrong".
                rec.correct_by_model[m] = critical ? (m != base) : (j % 2 == 0);
            }
            eval_meta.push_back({rec.sample_id, 0, true});
            out.eval_records.push_back(std::move(rec));
        }
    }
    for (std::size_t i = 0; i < models.size(); ++i) {
        out.final_token_shards.push_back(make_shard(models[i], std::move(eval[i]), eval_meta));
    }
    return out;
}

// Crosscoder whose feature k is atom k (for k < n_atoms): decoder column
// presence_i * atom, encoder rows weighted so the joint encoding returns the
// atom's magnitude; remaining features are zero.
template <typename T = float>
CrosscoderParams<T> planted_params(const GroundTruthDictionary &dict, const CrosscoderConfig &config,
                                   const PresenceMap *presence = nullptr)
{
    const PresenceMap &pres = presence ? *presence : dict.presence;
    if (config.d_sparse < dict.n_atoms() || config.d_model != dict.atoms.cols()) {
        throw InvalidShape("planted crosscoder needs d_sparse >= n_atoms and matching d_model");
    }
    auto p = CrosscoderParams<T>::zeros(config.n_models(), config.d_model, config.d_sparse);
    for (std::size_t a = 0; a < dict.n_atoms(); ++a) {
        double p2 = 0.0;
        for (const auto &m : config.model_ids) {
            p2 += pres.at(m)[a] * pres.at(m)[a];
        }
        for (std::size_t i = 0; i < config.n_models(); ++i) {
            const double w = pres.at(config.model_ids[i])[a];
            for (std::size_t d = 0; d < config.d_model; ++d) {
                p.dec[i](d, a) = static_cast<T>(w * dict.atoms(a, d));
                p.enc[i](a, d) = p2 > 0.0 ? static_cast<T>(w / p2 * dict.atoms(a, d)) : T{0};
            }
        }
    }
    return p;
}

struct AtomRecovery {
    std::size_t atom = 0;
    AtomRole role = AtomRole::shared;
    std::string reference_model;
    std::size_t feature = 0;
    double cosine = 0.0;
    std::optional<double> nrn;                    // K = 2
    std::optional<std::array<double, 3>> mas;     // K = 3
};

struct RoleRecovery {
    std::size_t atoms = 0;
    std::size_t recovered = 0; // cosine above the report threshold
    double rate() const { return atoms ? static_cast<double>(recovered) / static_cast<double>(atoms) : 0.0; }
};

struct RecoveryReport {
    double cosine_threshold = 0.9;
    std::vector<AtomRecovery> atoms;
    std::map<AtomRole, RoleRecovery> by_role;

    std::vector<const AtomRecovery *> with_role(AtomRole r) const
    {
        std::vector<const AtomRecovery *> out;
        for (const auto &a : atoms) {
            if (a.role == r) {
                out.push_back(&a);
            }
        }
        return out;
    }
};

// Best-cosine learned decoder column for every atom present in at least one
// model, looked up in the base model when the atom is present there and
// otherwise in the model where it is most present.
template <typename T>
RecoveryReport recovery_eval(const CrosscoderParams<T> &params, const CrosscoderConfig &config,
                             const GroundTruthDictionary &dict, double cosine_threshold = 0.9,
                             const PresenceMap *presence = nullptr)
{
    const PresenceMap &pres = presence ? *presence : dict.presence;
    RecoveryReport rep;
    rep.cosine_threshold = cosine_threshold;
    const auto norms = decoder_l1_norms(params, config);
    std::optional<NrnVector> nrn_v;
    std::optional<MasTable> mas_t;
    if (config.n_models() == 2) {
        nrn_v = nrn(norms, config.model_ids[0], config.model_ids[1]);
    } else {
        mas_t = mas(norms, {config.model_ids[0], config.model_ids[1], config.model_ids[2]});
    }
    std::vector<std::vector<std::vector<double>>> unit;
    for (const auto &dec : params.dec) {
        unit.push_back(detail::unit_columns(dec));
    }
    for (std::size_t a = 0; a < dict.n_atoms(); ++a) {
        std::size_t ref = config.n_models();
        if (pres.at(config.model_ids[0])[a] > 0.0) {
            ref = 0;
        } else {
            double best_p = 0.0;
            for (std::size_t i = 1; i < config.n_models(); ++i) {
                const double p = pres.at(config.model_ids[i])[a];
                if (p > best_p) {
                    best_p = p;
                    ref = i;
                }
            }
        }
        if (ref == config.n_models()) {
            continue; // inactive reserve atom
        }
        AtomRecovery r;
        r.atom = a;
        r.role = dict.roles[a];
        r.reference_model = config.model_ids[ref];
        r.cosine = -2.0;
        for (std::size_t k = 0; k < unit[ref].size(); ++k) {
            const double c = dot(std::span<const double>(unit[ref][k]), dict.atoms.row(a));
            if (c > r.cosine) {
                r.cosine = c;
                r.feature = k;
            }
        }
        if (nrn_v && nrn_v->defined[r.feature]) {
            r.nrn = nrn_v->values[r.feature];
        }
        if (mas_t && mas_t->defined[r.feature]) {
            r.mas = mas_t->rows[r.feature];
        }
        auto &agg = rep.by_role[r.role];
        agg.atoms += 1;
        agg.recovered += r.cosine > cosine_threshold;
        rep.atoms.push_back(r);
    }
    return rep;
}

inline nlohmann::json dictionary_to_json(const GroundTruthDictionary &g)
{
    nlohmann::json atoms = nlohmann::json::array();
    for (std::size_t a = 0; a < g.n_atoms(); ++a) {
        atoms.push_back(std::vector<double>(g.atoms.row(a).begin(), g.atoms.row(a).end()));
    }
    nlohmann::json roles = nlohmann::json::array();
    for (auto r : g.roles) {
        roles.push_back(to_string(r));
    }
    return {{"schema_version", 1}, {"model_ids", g.model_ids}, {"d_model", g.atoms.cols()},
            {"atoms", atoms},      {"roles", roles},           {"presence", g.presence},
            {"firing_rate", g.firing_rate}};
}

inline GroundTruthDictionary dictionary_from_json(const nlohmann::json &j)
{
    GroundTruthDictionary g;
    try {
        g.model_ids = j.at("model_ids").get<std::vector<std::string>>();
        const auto d = j.at("d_model").get<std::size_t>();
        const auto &atoms = j.at("atoms");
        g.atoms = Matrix<double>(atoms.size(), d);
        for (std::size_t a = 0; a < atoms.size(); ++a) {
            const auto row = atoms[a].get<std::vector<double>>();
            if (row.size() != d) {
                throw FormatError("atom row length != d_model");
            }
            std::copy(row.begin(), row.end(), g.atoms.row(a).begin());
        }
        for (const auto &r : j.at("roles")) {
            g.roles.push_back(atom_role_from_string(r.get<std::string>()));
        }
        g.presence = j.at("presence").get<PresenceMap>();
        g.firing_rate = j.at("firing_rate").get<std::vector<double>>();
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("ground truth JSON: ") + e.what());
    }
    return g;
}

} // namespace xcoder

#endif
