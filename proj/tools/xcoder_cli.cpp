// Command-line front end: train, analyze, genfeat, synth, gradcheck.
//
// Exit codes: 0 ok, 1 other failure, 2 config, 3 divergence, 4 model-set
// mismatch, 5 empty critical set, 6 infeasible dictionary.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xcoder.hpp"

using namespace xcoder;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int cli_schema_version = 1;

enum ExitCode { exit_ok = 0, exit_failure = 1, exit_config = 2, exit_diverged = 3,
                exit_mismatch = 4, exit_empty = 5, exit_infeasible = 6 };

json read_json(const fs::path &path)
{
    try {
        return json::parse(detail::read_file(path));
    } catch (const json::parse_error &e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void write_json(const fs::path &path, json j)
{
    j["schema_version"] = j.value("schema_version", cli_schema_version);
    detail::write_file(path, j.dump(2) + "\n");
}

class Csv {
public:
    explicit Csv(const fs::path &path) : out_(path)
    {
        if (!out_) {
            throw IoError("cannot open " + path.string() + " for writing");
        }
        out_.precision(17);
    }
    template <typename... Ts>
    void row(const Ts &...cells)
    {
        bool first = true;
        ((out_ << (first ? "" : ",") << cells, first = false), ...);
        out_ << '\n';
    }

private:
    std::ofstream out_;
};

void reject_unknown_keys(const json &j, const std::set<std::string> &known, const std::string &what)
{
    if (!j.is_object()) {
        throw ConfigError(what + " must be a JSON object");
    }
    for (const auto &[k, v] : j.items()) {
        if (!known.count(k)) {
            throw ConfigError(what + ": unknown key '" + k + "'");
        }
    }
}

template <typename T>
void take(const json &j, const char *key, T &dst, const std::string &what)
{
    if (!j.contains(key)) {
        return;
    }
    try {
        dst = j.at(key).get<T>();
    } catch (const json::exception &e) {
        throw ConfigError(what + ": field '" + key + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Run config

struct RunConfig {
    CrosscoderConfig crosscoder;
    std::string manifest;
    std::string out_dir = ".";
    std::size_t top_n = default_top_n;
    std::size_t bins = 100;
    double fraction = default_threshold_fraction;
    double min_cosine = default_min_cosine;
};

RunConfig parse_run_config(const json &j)
{
    static const std::set<std::string> known{
        "schema_version", "model_ids", "d_model", "d_sparse", "beta", "lr", "batch_size", "total_tokens",
        "seed", "checkpoint_every", "log_every", "norm_kind", "manifest", "out_dir", "top_n", "bins",
        "fraction", "min_cosine"};
    reject_unknown_keys(j, known, "run config");
    RunConfig r;
    auto &c = r.crosscoder;
    const std::string w = "run config";
    take(j, "model_ids", c.model_ids, w);
    take(j, "d_model", c.d_model, w);
    take(j, "d_sparse", c.d_sparse, w);
    take(j, "beta", c.beta, w);
    take(j, "lr", c.lr, w);
    take(j, "batch_size", c.batch_size, w);
    take(j, "total_tokens", c.total_tokens, w);
    take(j, "seed", c.seed, w);
    take(j, "checkpoint_every", c.checkpoint_every, w);
    take(j, "log_every", c.log_every, w);
    std::string norm = to_string(c.norm_kind);
    take(j, "norm_kind", norm, w);
    c.norm_kind = norm_kind_from_string(norm);
    take(j, "manifest", r.manifest, w);
    take(j, "out_dir", r.out_dir, w);
    take(j, "top_n", r.top_n, w);
    take(j, "bins", r.bins, w);
    take(j, "fraction", r.fraction, w);
    take(j, "min_cosine", r.min_cosine, w);
    return r;
}

json run_config_to_json(const RunConfig &r)
{
    auto j = config_to_json(r.crosscoder);
    j["manifest"] = r.manifest;
    j["out_dir"] = r.out_dir;
    j["top_n"] = r.top_n;
    j["bins"] = r.bins;
    j["fraction"] = r.fraction;
    j["min_cosine"] = r.min_cosine;
    j["schema_version"] = cli_schema_version;
    return j;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string config;
    std::string manifest;
    std::string out;
    std::optional<std::uint64_t> seed;
};

std::string checkpoint_name(std::uint64_t step)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "checkpoint_%08llu.xckp", static_cast<unsigned long long>(step));
    return buf;
}

void write_loss_log(const Checkpoint &ck, const fs::path &path)
{
    Csv csv(path);
    std::vector<std::string> head{"step", "total", "sparsity"};
    for (const auto &m : ck.config.model_ids) head.push_back("recon_" + m);
    std::string line;
    for (std::size_t i = 0; i < head.size(); ++i) line += (i ? "," : "") + head[i];
    csv.row(line);
    for (const auto &e : ck.loss_log) {
        std::string recon;
        char buf[64];
        for (double v : e.loss.recon_per_model) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            recon += buf;
        }
        std::snprintf(buf, sizeof buf, "%.17g", e.loss.total);
        std::string total = buf;
        std::snprintf(buf, sizeof buf, "%.17g", e.loss.sparsity);
        csv.row(std::to_string(e.step), total, std::string(buf) + recon);
    }
}

int cmd_train(const TrainArgs &a)
{
    auto run = parse_run_config(read_json(a.config));
    if (!a.manifest.empty()) run.manifest = a.manifest;
    if (!a.out.empty()) run.out_dir = a.out;
    if (a.seed) run.crosscoder.seed = *a.seed;
    if (run.manifest.empty()) {
        throw ConfigError("missing required field 'manifest' (set it in the config or pass --manifest)");
    }
    fs::path manifest_path = run.manifest;
    if (manifest_path.is_relative() && !a.manifest.empty()) {
        manifest_path = fs::absolute(manifest_path);
    } else if (manifest_path.is_relative()) {
        manifest_path = fs::path(a.config).parent_path() / manifest_path;
    }
    const auto manifest = load_manifest(manifest_path);
    auto ds = std::make_shared<const Dataset>(load_dataset(manifest));
    auto &c = run.crosscoder;
    if (c.model_ids.empty()) c.model_ids = ds->models;
    if (c.d_model == 0) c.d_model = ds->d_model();
    validate_config(c);

    const fs::path out = run.out_dir;
    fs::create_directories(out);
    write_json(out / "config.json", run_config_to_json(run));
    TrainOptions opt;
    opt.keep_intermediate = false;
    opt.on_checkpoint = [&](const Checkpoint &ck) { save_checkpoint(ck, out / checkpoint_name(ck.step)); };
    const auto result = train(c, ds, opt);
    save_checkpoint(result.final, out / "final.xckp");
    write_loss_log(result.final, out / "loss_log.csv");
    std::cout << "trained " << result.final.step << " steps; final loss "
              << (result.final.loss_log.empty() ? 0.0 : result.final.loss_log.back().loss.total) << "\n";
    return exit_ok;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
    std::vector<std::string> checkpoints;
    std::string out = ".";
    std::size_t top_n = default_top_n;
    std::size_t bins = 100;
    double min_cosine = default_min_cosine;
    std::string model;
};

std::vector<Checkpoint> load_all(const std::vector<std::string> &paths)
{
    std::vector<Checkpoint> out;
    for (const auto &p : paths) out.push_back(load_checkpoint(p));
    return out;
}

void require_count(const std::vector<Checkpoint> &cks, std::size_t n, const std::string &cmd)
{
    if (cks.size() != n) {
        throw ConfigError(cmd + " needs exactly " + std::to_string(n) + " checkpoint(s), got "
                          + std::to_string(cks.size()));
    }
}

NrnVector nrn_of(const Checkpoint &ck)
{
    const auto &ids = ck.config.model_ids;
    if (ids.size() != 2) {
        throw ModelSetMismatch("nrn needs a 2-model crosscoder, checkpoint has " + std::to_string(ids.size()));
    }
    return nrn(decoder_l1_norms(ck.params, ck.config), ids[0], ids[1]);
}

MasTable mas_of(const Checkpoint &ck)
{
    const auto &ids = ck.config.model_ids;
    if (ids.size() != 3) {
        throw ModelSetMismatch("mas needs a 3-model crosscoder, checkpoint has " + std::to_string(ids.size()));
    }
    return mas(decoder_l1_norms(ck.params, ck.config), {ids[0], ids[1], ids[2]});
}

// The per-feature score used for ranking and histograms: NRN for two
// models, the chosen model's MAS share (default the last model) for three.
std::pair<std::vector<double>, std::vector<bool>> feature_score(const Checkpoint &ck, const std::string &model)
{
    if (ck.config.n_models() == 2) {
        if (!model.empty() && model != ck.config.model_ids[1]) {
            throw ConfigError("for two models the score is the NRN of '" + ck.config.model_ids[1] + "'");
        }
        auto v = nrn_of(ck);
        return {v.values, v.defined};
    }
    const auto t = mas_of(ck);
    const std::size_t col = model.empty() ? 2 : ck.config.model_index(model);
    return {t.column(col), t.defined};
}

void check_consistent(const std::vector<Checkpoint> &cks)
{
    for (const auto &ck : cks) {
        if (ck.config.model_ids != cks[0].config.model_ids || ck.config.d_model != cks[0].config.d_model) {
            throw ModelSetMismatch("checkpoints disagree on model set or d_model");
        }
    }
}

std::string label_of(const std::string &path) { return fs::path(path).stem().string(); }

RankedFeatures ranking_of(const Checkpoint &ck, const AnalyzeArgs &a, const std::string &label)
{
    auto [v, d] = feature_score(ck, a.model);
    return rank_values(v, d, a.top_n, label);
}

int cmd_analyze(const std::string &sub, const AnalyzeArgs &a)
{
    const auto cks = load_all(a.checkpoints);
    const fs::path out = a.out;
    fs::create_directories(out);
    if (sub == "nrn") {
        require_count(cks, 1, sub);
        const auto v = nrn_of(cks[0]);
        Csv csv(out / "nrn.csv");
        csv.row("feature", "nrn", "defined");
        for (std::size_t k = 0; k < v.size(); ++k) csv.row(k, v.values[k], v.defined[k] ? 1 : 0);
        write_json(out / "nrn.json", {{"base", v.base_id}, {"tuned", v.tuned_id}, {"values", v.values}, {"defined", v.defined}});
    } else if (sub == "mas") {
        require_count(cks, 1, sub);
        const auto t = mas_of(cks[0]);
        const auto &ids = cks[0].config.model_ids;
        Csv csv(out / "mas.csv");
        csv.row("feature", ids[0], ids[1], ids[2], "defined");
        for (std::size_t k = 0; k < t.rows.size(); ++k) csv.row(k, t.rows[k][0], t.rows[k][1], t.rows[k][2], t.defined[k] ? 1 : 0);
        write_json(out / "mas.json", {{"models", t.models}, {"rows", t.rows}, {"defined", t.defined}});
    } else if (sub == "rank") {
        require_count(cks, 1, sub);
        const auto r = ranking_of(cks[0], a, label_of(a.checkpoints[0]));
        Csv csv(out / "rank.csv");
        csv.row("rank", "feature", "score");
        for (std::size_t i = 0; i < r.entries.size(); ++i) csv.row(i + 1, r.entries[i].first, r.entries[i].second);
        write_json(out / "rank.json", {{"label", r.label}, {"top_n", r.top_n}, {"short_list", r.short_list},
                                       {"features", r.indices()}});
    } else if (sub == "overlap") {
        if (cks.size() < 2) {
            throw ConfigError("overlap needs at least two checkpoints");
        }
        check_consistent(cks);
        const std::string ref = a.model.empty() ? cks[0].config.model_ids.back() : a.model;
        std::vector<RankedFeatures> rankings;
        std::vector<const CrosscoderParams<float> *> ps;
        std::vector<const CrosscoderConfig *> cs;
        for (std::size_t i = 0; i < cks.size(); ++i) {
            rankings.push_back(ranking_of(cks[i], a, label_of(a.checkpoints[i])));
            ps.push_back(&cks[i].params);
            cs.push_back(&cks[i].config);
        }
        const auto m = overlap_matrix(rankings, all_pair_matchings(ps, cs, ref, a.min_cosine));
        Csv csv(out / "overlap.csv");
        std::string head = "checkpoint";
        for (const auto &l : m.labels) head += "," + l;
        csv.row(head);
        for (std::size_t i = 0; i < m.labels.size(); ++i) {
            std::string line = m.labels[i];
            for (double f : m.fractions[i]) line += "," + json(f).dump();
            csv.row(line);
        }
        write_json(out / "overlap.json", {{"labels", m.labels}, {"top_n", m.top_n}, {"reference_model", ref},
                                          {"counts", m.counts}, {"fractions", m.fractions},
                                          {"mean_off_diagonal", m.mean_off_diagonal()}});
    } else if (sub == "rankshift") {
        require_count(cks, 2, sub);
        check_consistent(cks);
        const std::string ref = a.model.empty() ? cks[0].config.model_ids.back() : a.model;
        const auto before = ranking_of(cks[0], a, label_of(a.checkpoints[0]));
        const auto after = ranking_of(cks[1], a, label_of(a.checkpoints[1]));
        const auto m = match_features(cks[0].params, cks[0].config, cks[1].params, cks[1].config, ref, a.min_cosine);
        const auto t = rank_shift(before, after, m);
        auto opt = [](const std::optional<std::size_t> &v) { return v ? std::to_string(*v) : std::string(); };
        Csv csv(out / "rankshift.csv");
        csv.row("feature_old", "feature_new", "old_rank", "new_rank", "shift", "blank");
        json rows = json::array();
        for (const auto &r : t.rows) {
            csv.row(opt(r.feature_old), opt(r.feature_new), opt(r.old_rank), opt(r.new_rank),
                    r.blank ? std::string() : std::to_string(r.shift), r.blank ? 1 : 0);
            rows.push_back({{"feature_old", r.feature_old ? json(*r.feature_old) : json()},
                            {"feature_new", r.feature_new ? json(*r.feature_new) : json()},
                            {"old_rank", r.old_rank ? json(*r.old_rank) : json()},
                            {"new_rank", r.new_rank ? json(*r.new_rank) : json()},
                            {"shift", r.shift}, {"blank", r.blank}});
        }
        write_json(out / "rankshift.json", {{"from", t.from_label}, {"to", t.to_label}, {"reference_model", ref},
                                            {"blank_count", t.blank_count()}, {"rows", rows}});
    } else if (sub == "hist") {
        require_count(cks, 1, sub);
        auto [v, d] = feature_score(cks[0], a.model);
        const auto h = histogram(v, d, a.bins);
        Csv csv(out / "hist.csv");
        csv.row("bin_lo", "bin_hi", "count");
        for (std::size_t b = 0; b < h.counts.size(); ++b) csv.row(h.edges[b], h.edges[b + 1], h.counts[b]);
        write_json(out / "hist.json", {{"edges", h.edges}, {"counts", h.counts}, {"total", h.total()}});
    } else {
        throw ConfigError("unknown analyze subcommand '" + sub + "'");
    }
    return exit_ok;
}

// ---------------------------------------------------------------------------
// genfeat

struct GenfeatArgs {
    std::string checkpoint;
    std::string records;
    std::string base_acts;
    std::string rl_acts;
    std::string base_model;
    std::string rl_model;
    std::string input;
    std::string out = ".";
    double fraction = default_threshold_fraction;
    std::string model;
    std::string mode = "amplify";
    std::optional<double> value;
    std::vector<std::size_t> features;
    std::uint32_t layer = 0;
};

Matrix<float> scaled(Matrix<float> m, double s)
{
    for (auto &v : m.flat()) v = static_cast<float>(static_cast<double>(v) * s);
    return m;
}

int genfeat_score(const GenfeatArgs &a)
{
    const auto ck = load_checkpoint(a.checkpoint);
    const auto &ids = ck.config.model_ids;
    const std::string base = a.base_model.empty() ? ids.front() : a.base_model;
    const std::string rl = a.rl_model.empty() ? ids.back() : a.rl_model;
    const auto records = records_from_json(read_json(a.records));
    const auto base_shard = read_shard(a.base_acts);
    const auto rl_shard = read_shard(a.rl_acts);
    const auto sets = select_critical(records, base, rl);
    json tasks = json::array();
    const fs::path out = a.out;
    fs::create_directories(out);
    Csv csv(out / "scores.csv");
    csv.row("task", "feature", "score");
    for (const auto &s : sets) {
        // Activations are stored raw; bring them to the crosscoder's scale.
        const auto xb = scaled(final_token_rows(base_shard, s.sample_ids), ck.scale_of(base));
        const auto xr = scaled(final_token_rows(rl_shard, s.sample_ids), ck.scale_of(rl));
        const auto g = gen_scores(ck.params, ck.config, xb, xr, base, rl, s.task);
        for (std::size_t k = 0; k < g.scores.size(); ++k) csv.row(g.task, k, g.scores[k]);
        tasks.push_back({{"task", g.task}, {"n_samples", g.n_samples}, {"scores", g.scores}});
    }
    write_json(out / "scores.json", {{"base_model", base}, {"rl_model", rl}, {"tasks", tasks}});
    return exit_ok;
}

int genfeat_threshold(const GenfeatArgs &a)
{
    const auto j = read_json(a.input);
    json sets = json::array();
    try {
        for (const auto &t : j.at("tasks")) {
            GenScoreVector g{t.at("task").get<std::string>(), t.at("scores").get<std::vector<double>>(),
                             t.value("n_samples", std::size_t{0})};
            const auto s = threshold_features(g, a.fraction);
            sets.push_back({{"task", s.task}, {"threshold", s.threshold}, {"features", s.features}});
        }
    } catch (const json::exception &e) {
        throw ConfigError(std::string("scores file: ") + e.what());
    }
    fs::create_directories(a.out);
    write_json(fs::path(a.out) / "sets.json", {{"fraction", a.fraction}, {"sets", sets}});
    return exit_ok;
}

int genfeat_intersect(const GenfeatArgs &a)
{
    const auto j = read_json(a.input);
    std::vector<TaskFeatureSet> sets;
    try {
        for (const auto &s : j.at("sets")) {
            TaskFeatureSet t;
            t.task = s.at("task").get<std::string>();
            t.features = s.at("features").get<std::vector<std::size_t>>();
            sets.push_back(std::move(t));
        }
    } catch (const json::exception &e) {
        throw ConfigError(std::string("sets file: ") + e.what());
    }
    const auto r = intersect(sets);
    fs::create_directories(a.out);
    write_json(fs::path(a.out) / "intersection.json", {{"tasks", r.tasks}, {"features", r.features}, {"overlap", r.overlap}});
    return exit_ok;
}

int genfeat_export(const GenfeatArgs &a)
{
    const auto ck = load_checkpoint(a.checkpoint);
    auto features = a.features;
    if (!a.input.empty()) {
        const auto j = read_json(a.input);
        take(j, "features", features, "feature file");
    }
    const auto mode = intervention_mode_from_string(a.mode);
    if (mode == InterventionMode::zero && a.value) {
        throw ConfigError("--value only applies to amplify");
    }
    const std::string target = a.model.empty() ? ck.config.model_ids.back() : a.model;
    const auto spec = export_intervention(ck.params, ck.config, features, target, mode,
                                          a.value.value_or(default_amplify_value),
                                          label_of(a.checkpoint), a.layer, ck.scale_of(target));
    fs::create_directories(a.out);
    write_json(fs::path(a.out) / "intervention.json", spec_to_json(spec));
    return exit_ok;
}

int cmd_genfeat(const std::string &sub, const GenfeatArgs &a)
{
    if (sub == "score") return genfeat_score(a);
    if (sub == "threshold") return genfeat_threshold(a);
    if (sub == "intersect") return genfeat_intersect(a);
    if (sub == "export") return genfeat_export(a);
    throw ConfigError("unknown genfeat subcommand '" + sub + "'");
}

// ---------------------------------------------------------------------------
// synth

SynthConfig parse_synth_config(const json &j)
{
    static const std::set<std::string> known{
        "schema_version", "model_ids", "sft_model", "rl_model", "d_model", "n_shared", "n_base_only",
        "n_sft_specific", "n_rl_specific", "n_generalization", "n_tokens", "tokens_per_sample",
        "firing_rate", "magnitude_min", "magnitude_max", "noise_sigma", "turnover_rate", "n_checkpoints",
        "max_abs_cosine", "max_retries", "n_tasks", "critical_per_task", "noncritical_per_task",
        "distractors_per_task", "normalize", "scale_sample_size", "seed"};
    reject_unknown_keys(j, known, "synth config");
    SynthConfig c;
    const std::string w = "synth config";
    take(j, "model_ids", c.model_ids, w);
    take(j, "sft_model", c.sft_model, w);
    take(j, "rl_model", c.rl_model, w);
    take(j, "d_model", c.d_model, w);
    take(j, "n_shared", c.n_shared, w);
    take(j, "n_base_only", c.n_base_only, w);
    take(j, "n_sft_specific", c.n_sft_specific, w);
    take(j, "n_rl_specific", c.n_rl_specific, w);
    take(j, "n_generalization", c.n_generalization, w);
    take(j, "n_tokens", c.n_tokens, w);
    take(j, "tokens_per_sample", c.tokens_per_sample, w);
    take(j, "firing_rate", c.firing_rate, w);
    take(j, "magnitude_min", c.magnitude_min, w);
    take(j, "magnitude_max", c.magnitude_max, w);
    take(j, "noise_sigma", c.noise_sigma, w);
    take(j, "turnover_rate", c.turnover_rate, w);
    take(j, "n_checkpoints", c.n_checkpoints, w);
    take(j, "max_abs_cosine", c.max_abs_cosine, w);
    take(j, "max_retries", c.max_retries, w);
    take(j, "n_tasks", c.n_tasks, w);
    take(j, "critical_per_task", c.critical_per_task, w);
    take(j, "noncritical_per_task", c.noncritical_per_task, w);
    take(j, "distractors_per_task", c.distractors_per_task, w);
    take(j, "normalize", c.normalize, w);
    take(j, "scale_sample_size", c.scale_sample_size, w);
    take(j, "seed", c.seed, w);
    return c;
}

// Writes one corpus as raw shards plus a manifest carrying the scales.
void write_corpus(const Dataset &ds, const SynthConfig &sc, const fs::path &dir)
{
    fs::create_directories(dir);
    DatasetManifest m;
    m.models = ds.models;
    m.source_tags = ds.source_tags;
    std::vector<std::string> group;
    for (std::size_t i = 0; i < ds.models.size(); ++i) {
        const std::string name = ds.models[i] + ".acts";
        write_shard(ds.groups[0][i], dir / name);
        group.push_back(name);
    }
    m.shard_groups.push_back(group);
    if (sc.normalize) {
        m.normalization = compute_normalization(ds, sc.scale_sample_size);
    }
    save_manifest(m, dir / "manifest.json");
}

int cmd_synth(const std::string &config_path, const std::string &out_dir, std::optional<std::uint64_t> seed)
{
    auto sc = config_path.empty() ? SynthConfig{} : parse_synth_config(read_json(config_path));
    if (seed) sc.seed = *seed;
    const fs::path out = out_dir;
    fs::create_directories(out);
    Rng rng(sc.seed);
    const auto dict = gen_dictionary(sc, rng);
    const auto presences = turnover_sequence(dict, sc, rng);
    auto raw = sc;
    raw.normalize = false; // shards stay raw; the manifest records the scales
    for (std::size_t c = 0; c < presences.size(); ++c) {
        const auto ds = gen_dataset(dict, raw, rng, &presences[c]);
        const fs::path dir = presences.size() == 1 ? out : out / ("checkpoint_" + std::to_string(c));
        write_corpus(*ds.corpus, sc, dir);
        if (!ds.eval_records.empty()) {
            write_json(dir / "eval_records.json", records_to_json(ds.eval_records));
            for (const auto &s : ds.final_token_shards) write_shard(s, dir / (s.header.model_id + ".final.acts"));
            json distractors = ds.task_distractors;
            write_json(dir / "distractors.json", {{"task_distractors", distractors}});
        }
        json pres = presences[c];
        write_json(dir / "presence.json", {{"presence", pres}});
    }
    write_json(out / "dictionary.json", dictionary_to_json(dict));
    std::cout << "generated " << dict.n_atoms() << " atoms, " << presences.size() << " corpus(es) in " << out << "\n";
    return exit_ok;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(std::uint64_t seed, bool corrupt)
{
    double worst = 0.0;
    for (NormKind kind : {NormKind::L1, NormKind::L2}) {
        CrosscoderConfig c;
        c.model_ids = {"base", "sft", "rl"};
        c.d_model = 8;
        c.d_sparse = 16;
        c.norm_kind = kind;
        Rng rng(seed);
        auto p = CrosscoderParams<double>::zeros(3, 8, 16);
        std::vector<Matrix<double>> acts(3, Matrix<double>(4, 8));
        // Redraw until no pre-activation or decoder entry sits on a kink.
        for (int attempt = 0;; ++attempt) {
            p.for_each_tensor([&](Matrix<double> &m) {
                for (auto &v : m.flat()) {
                    const double mag = rng.uniform(0.05, 0.5);
                    v = rng.bernoulli(0.5) ? mag : -mag;
                }
            });
            for (auto &a : acts) {
                for (auto &v : a.flat()) v = rng.normal();
            }
            Matrix<double> pre;
            encode(p, std::span<const Matrix<double>>(acts), &pre);
            if (std::all_of(pre.flat().begin(), pre.flat().end(), [](double v) { return std::abs(v) > 1e-3; })) {
                break;
            }
            if (attempt > 1000) {
                throw ConfigError("could not draw a kink-free instance");
            }
        }
        const auto lg = backward(p, c, std::span<const Matrix<double>>(acts));
        auto theta = flatten(p);
        auto analytic = flatten(lg.grads);
        if (corrupt) {
            analytic[analytic.size() / 2] += 1.0;
        }
        auto scratch = p;
        auto loss_fn = [&](std::span<const double> th) {
            unflatten(th, scratch);
            return loss(scratch, c, std::span<const Matrix<double>>(acts)).total;
        };
        Rng probe_rng(seed + 1);
        const auto res = finite_diff_check(loss_fn, std::span<double>(theta), analytic, theta.size(), 1e-6, probe_rng);
        std::printf("%s penalty: max relative error %.3e over %zu coordinates\n", to_string(kind).c_str(),
                    res.max_rel_error, res.probes);
        worst = std::max(worst, res.max_rel_error);
    }
    const bool ok = worst <= 1e-3;
    std::printf("%s: max relative error %.3e (limit 1e-3)\n", ok ? "ok" : "FAILED", worst);
    return ok ? exit_ok : exit_failure;
}

int exit_code_for(const std::exception &e)
{
    if (dynamic_cast<const DivergedAtStep *>(&e) || dynamic_cast<const NonFiniteLoss *>(&e)) return exit_diverged;
    if (dynamic_cast<const ModelSetMismatch *>(&e)) return exit_mismatch;
    if (dynamic_cast<const EmptyCriticalSet *>(&e)) return exit_empty;
    if (dynamic_cast<const DictionaryInfeasible *>(&e)) return exit_infeasible;
    if (dynamic_cast<const ConfigError *>(&e) || dynamic_cast<const InvalidFeature *>(&e)
        || dynamic_cast<const MissingLabel *>(&e) || dynamic_cast<const InvalidBatchSize *>(&e)) {
        return exit_config;
    }
    return exit_failure;
}

} // namespace

int main(int argc, char **argv)
{
    CLI::App app{"Sparse crosscoder training and analysis"};
    app.require_subcommand(1);
    std::function<int()> action;

    TrainArgs ta;
    auto *train_cmd = app.add_subcommand("train", "Train a crosscoder from a run config");
    train_cmd->add_option("--config", ta.config, "Run config JSON")->required();
    train_cmd->add_option("--manifest", ta.manifest, "Dataset manifest (overrides the config)");
    train_cmd->add_option("--out", ta.out, "Output directory (overrides the config)");
    train_cmd->add_option("--seed", ta.seed, "Seed (overrides the config)");
    train_cmd->callback([&] { action = [&] { return cmd_train(ta); }; });

    AnalyzeArgs aa;
    auto *analyze_cmd = app.add_subcommand("analyze", "Attribution and checkpoint-dynamics analyses");
    analyze_cmd->require_subcommand(1);
    for (const char *sub : {"nrn", "mas", "rank", "overlap", "rankshift", "hist"}) {
        auto *s = analyze_cmd->add_subcommand(sub);
        s->add_option("checkpoints", aa.checkpoints, "Checkpoint files")->required();
        s->add_option("--out", aa.out, "Output directory");
        s->add_option("--top-n", aa.top_n, "Top-n set size")->check(CLI::PositiveNumber);
        s->add_option("--bins", aa.bins, "Histogram bins")->check(CLI::PositiveNumber);
        s->add_option("--min-cosine", aa.min_cosine, "Matching threshold");
        s->add_option("--model", aa.model, "Score column (three models) or matching reference model");
        const std::string name = sub;
        s->callback([&, name] { action = [&, name] { return cmd_analyze(name, aa); }; });
    }

    GenfeatArgs ga;
    auto *genfeat_cmd = app.add_subcommand("genfeat", "Generalization-feature pipeline");
    genfeat_cmd->require_subcommand(1);
    auto *score = genfeat_cmd->add_subcommand("score", "Per-task generalization scores");
    score->add_option("--checkpoint", ga.checkpoint)->required();
    score->add_option("--records", ga.records, "Eval records JSON")->required();
    score->add_option("--base-acts", ga.base_acts, "Final-token shard of the base model")->required();
    score->add_option("--rl-acts", ga.rl_acts, "Final-token shard of the RL model")->required();
    score->add_option("--base-model", ga.base_model);
    score->add_option("--rl-model", ga.rl_model);
    auto *threshold = genfeat_cmd->add_subcommand("threshold", "Threshold scores into task feature sets");
    threshold->add_option("scores", ga.input, "scores.json")->required();
    threshold->add_option("--fraction", ga.fraction, "Fraction of the maximum score");
    auto *inter = genfeat_cmd->add_subcommand("intersect", "Intersect task feature sets");
    inter->add_option("sets", ga.input, "sets.json")->required();
    auto *exp = genfeat_cmd->add_subcommand("export", "Export an intervention spec");
    exp->add_option("--checkpoint", ga.checkpoint)->required();
    exp->add_option("--features", ga.input, "JSON file with a 'features' array");
    exp->add_option("--feature", ga.features, "Feature index (repeatable)");
    exp->add_option("--model", ga.model, "Target model (default: last model)");
    exp->add_option("--mode", ga.mode, "zero or amplify");
    exp->add_option("--value", ga.value, "Clamp value for amplify");
    exp->add_option("--layer", ga.layer, "Layer index recorded in the spec");
    for (auto *s : {score, threshold, inter, exp}) {
        s->add_option("--out", ga.out, "Output directory");
        const std::string name = s->get_name();
        s->callback([&, name] { action = [&, name] { return cmd_genfeat(name, ga); }; });
    }

    std::string synth_config, synth_out = ".";
    std::optional<std::uint64_t> synth_seed;
    auto *synth_cmd = app.add_subcommand("synth", "Generate a synthetic activation dataset");
    synth_cmd->add_option("--config", synth_config, "Synthetic data config JSON");
    synth_cmd->add_option("--out", synth_out, "Output directory");
    synth_cmd->add_option("--seed", synth_seed, "Seed (overrides the config)");
    synth_cmd->callback([&] { action = [&] { return cmd_synth(synth_config, synth_out, synth_seed); }; });

    std::uint64_t gc_seed = 11;
    bool gc_corrupt = false;
    auto *gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the loss gradient");
    gc_cmd->add_option("--seed", gc_seed, "Instance seed");
    gc_cmd->add_flag("--corrupt-gradient", gc_corrupt)->group(""); // test hook
    gc_cmd->callback([&] { action = [&] { return cmd_gradcheck(gc_seed, gc_corrupt); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e);
        return rc == 0 ? exit_ok : exit_config;
    }
    try {
        return action ? action() : exit_config;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}
