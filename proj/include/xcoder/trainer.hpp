#ifndef XCODER_TRAINER_HPP
#define XCODER_TRAINER_HPP

// Adam training loop over aligned batches, plus the checkpoint file format:
//
//   "XCKP" | u32 version | u64 json_len | JSON (config, step, loss log,
//   stream position, tensor directory) | u32 tensor_count |
//   tensor_count actstore shard blocks (model_id = tensor name,
//   n_tokens = rows, d_model = cols, empty metadata)

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "actstore.hpp"
#include "adam.hpp"
#include "crosscoder.hpp"
#include "error.hpp"
#include "json.hpp"

namespace xcoder {

inline constexpr char checkpoint_magic[4] = {'X', 'C', 'K', 'P'};
inline constexpr std::uint32_t checkpoint_version = 1;

struct LossLogEntry {
    std::uint64_t step = 0;
    LossBreakdown loss;
};

struct Checkpoint {
    std::uint64_t step = 0;
    CrosscoderParams<float> params;
    CrosscoderConfig config;
    std::vector<LossLogEntry> loss_log;
    BatchStream::Position stream_position; // the "rng_state" for resuming data order
    std::vector<AdamState<float>> optimizer; // one per tensor, canonical order
    // Per-model factor applied to raw activations before they reach the
    // crosscoder (dataset normalization). Raw-space consumers multiply by it.
    std::map<std::string, double> activation_scales;

    double scale_of(const std::string &model) const
    {
        auto it = activation_scales.find(model);
        return it == activation_scales.end() ? 1.0 : it->second;
    }
};

namespace detail {

inline std::vector<std::string> tensor_names(const CrosscoderConfig &c)
{
    std::vector<std::string> names;
    for (const auto &m : c.model_ids) names.push_back("enc/" + m);
    names.push_back("enc_bias");
    for (const auto &m : c.model_ids) names.push_back("dec/" + m);
    for (const auto &m : c.model_ids) names.push_back("dec_bias/" + m);
    return names;
}

inline nlohmann::json loss_to_json(const LossBreakdown &l, const CrosscoderConfig &c)
{
    nlohmann::json recon = nlohmann::json::object();
    for (std::size_t i = 0; i < l.recon_per_model.size(); ++i) {
        recon[c.model_ids.at(i)] = l.recon_per_model[i];
    }
    return {{"recon", recon}, {"sparsity", l.sparsity}, {"total", l.total}};
}

inline LossBreakdown loss_from_json(const nlohmann::json &j, const CrosscoderConfig &c)
{
    LossBreakdown l;
    for (const auto &m : c.model_ids) {
        l.recon_per_model.push_back(j.at("recon").at(m).get<double>());
    }
    l.sparsity = j.at("sparsity").get<double>();
    l.total = j.at("total").get<double>();
    return l;
}

inline void put_tensor(ByteWriter &w, const std::string &name, const Matrix<float> &m)
{
    ActivationShard s;
    s.header.model_id = name;
    s.header.d_model = static_cast<std::uint32_t>(m.cols());
    s.header.n_tokens = m.rows();
    s.data = m;
    const auto bytes = encode_shard(s);
    w.put_bytes(bytes.data(), bytes.size());
}

inline Matrix<float> get_tensor(ByteReader &r, const std::string &expected_name)
{
    auto s = decode_shard(r);
    if (s.header.model_id != expected_name) {
        throw FormatError("checkpoint tensor '" + s.header.model_id + "' where '" + expected_name
                          + "' was expected");
    }
    return std::move(s.data);
}

} // namespace detail

inline std::string encode_checkpoint(const Checkpoint &ck)
{
    const auto names = detail::tensor_names(ck.config);
    nlohmann::json j;
    j["schema_version"] = checkpoint_version;
    j["config"] = config_to_json(ck.config);
    j["step"] = ck.step;
    nlohmann::json log = nlohmann::json::array();
    for (const auto &e : ck.loss_log) {
        auto le = detail::loss_to_json(e.loss, ck.config);
        le["step"] = e.step;
        log.push_back(std::move(le));
    }
    j["loss_log"] = std::move(log);
    j["rng_state"] = {{"epoch", ck.stream_position.epoch}, {"cursor", ck.stream_position.cursor}};
    j["tensors"] = names;
    j["activation_scales"] = ck.activation_scales;
    nlohmann::json opt = nlohmann::json::array();
    for (const auto &s : ck.optimizer) {
        opt.push_back({{"step_count", s.step_count},
                       {"beta1", s.hyper.beta1},
                       {"beta2", s.hyper.beta2},
                       {"epsilon", s.hyper.epsilon}});
    }
    j["optimizer"] = std::move(opt);
    const std::string js = j.dump();

    detail::ByteWriter w;
    w.put_bytes(checkpoint_magic, 4);
    w.put<std::uint32_t>(checkpoint_version);
    w.put<std::uint64_t>(js.size());
    w.put_bytes(js.data(), js.size());
    const bool with_opt = !ck.optimizer.empty();
    std::uint32_t count = static_cast<std::uint32_t>(names.size() * (with_opt ? 3 : 1));
    w.put<std::uint32_t>(count);
    std::size_t t = 0;
    ck.params.for_each_tensor([&](const Matrix<float> &m) { detail::put_tensor(w, names[t++], m); });
    if (with_opt) {
        for (std::size_t i = 0; i < names.size(); ++i) {
            detail::put_tensor(w, "adam_m/" + names[i], ck.optimizer[i].first_moment);
            detail::put_tensor(w, "adam_v/" + names[i], ck.optimizer[i].second_moment);
        }
    }
    return w.take();
}

inline Checkpoint decode_checkpoint(std::string_view bytes)
{
    detail::ByteReader r(bytes, "checkpoint");
    if (r.take(4) != std::string_view(checkpoint_magic, 4)) {
        throw FormatError("bad checkpoint magic, expected \"XCKP\"");
    }
    const auto version = r.get<std::uint32_t>();
    if (version != checkpoint_version) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto js_len = r.get<std::uint64_t>();
    if (js_len > r.remaining()) {
        throw FormatError("checkpoint JSON block truncated");
    }
    Checkpoint ck;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(r.take(js_len));
        ck.config = config_from_json(j.at("config"));
        ck.step = j.at("step").get<std::uint64_t>();
        for (const auto &e : j.at("loss_log")) {
            ck.loss_log.push_back({e.at("step").get<std::uint64_t>(), detail::loss_from_json(e, ck.config)});
        }
        ck.stream_position.epoch = j.at("rng_state").at("epoch").get<std::uint64_t>();
        ck.stream_position.cursor = j.at("rng_state").at("cursor").get<std::uint64_t>();
        if (j.contains("activation_scales")) {
            ck.activation_scales = j.at("activation_scales").get<std::map<std::string, double>>();
        }
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("checkpoint JSON: ") + e.what());
    }
    const auto names = detail::tensor_names(ck.config);
    const auto count = r.get<std::uint32_t>();
    const bool with_opt = count == names.size() * 3;
    if (count != names.size() && !with_opt) {
        throw FormatError("checkpoint holds " + std::to_string(count) + " tensors");
    }
    ck.params = CrosscoderParams<float>::zeros(ck.config.n_models(), ck.config.d_model, ck.config.d_sparse);
    std::size_t t = 0;
    ck.params.for_each_tensor([&](Matrix<float> &m) { m = detail::get_tensor(r, names[t++]); });
    validate_params(ck.params, ck.config);
    if (with_opt) {
        const auto &opt = j.at("optimizer");
        if (opt.size() != names.size()) {
            throw FormatError("optimizer state count mismatch");
        }
        for (std::size_t i = 0; i < names.size(); ++i) {
            AdamState<float> s;
            s.first_moment = detail::get_tensor(r, "adam_m/" + names[i]);
            s.second_moment = detail::get_tensor(r, "adam_v/" + names[i]);
            s.step_count = opt[i].at("step_count").get<std::uint64_t>();
            s.hyper = {opt[i].at("beta1").get<double>(), opt[i].at("beta2").get<double>(),
                       opt[i].at("epsilon").get<double>()};
            ck.optimizer.push_back(std::move(s));
        }
    }
    if (r.remaining() != 0) {
        throw FormatError("trailing bytes after checkpoint tensors");
    }
    return ck;
}

inline void save_checkpoint(const Checkpoint &ck, const std::filesystem::path &path)
{
    detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path)
{
    const auto bytes = detail::read_file(path);
    try {
        return decode_checkpoint(bytes);
    } catch (const FormatError &e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

struct TrainOptions {
    // Called for every intermediate checkpoint (every checkpoint_every steps).
    std::function<void(const Checkpoint &)> on_checkpoint;
    bool keep_intermediate = true;
    // Continue from this checkpoint instead of initializing.
    const Checkpoint *resume = nullptr;
};

struct TrainResult {
    Checkpoint final;
    std::vector<Checkpoint> intermediate;
};

inline std::uint64_t total_steps(const CrosscoderConfig &c)
{
    return (c.total_tokens + c.batch_size - 1) / c.batch_size;
}

inline void check_model_set(const CrosscoderConfig &config, const Dataset &ds)
{
    if (ds.models.size() != config.n_models()) {
        throw ModelSetMismatch("dataset has " + std::to_string(ds.models.size())
                               + " models, config has " + std::to_string(config.n_models()));
    }
    for (const auto &id : config.model_ids) {
        ds.model_index(id);
    }
    if (ds.d_model() != config.d_model) {
        throw ModelSetMismatch("dataset d_model " + std::to_string(ds.d_model())
                               + " != config d_model " + std::to_string(config.d_model));
    }
}

inline TrainResult train(const CrosscoderConfig &config, std::shared_ptr<const Dataset> dataset,
                         const TrainOptions &options = {})
{
    validate_config(config);
    check_model_set(config, *dataset);

    Checkpoint ck;
    if (options.resume) {
        ck = *options.resume;
        if (!(ck.config == config)) {
            throw ConfigError("resume checkpoint was produced by a different config");
        }
    } else {
        Rng rng(config.seed);
        ck.config = config;
        ck.params = init_params<float>(config, rng);
        for (std::size_t i = 0; i < dataset->models.size(); ++i) {
            ck.activation_scales[dataset->models[i]] = dataset->scales[i];
        }
    }
    if (ck.optimizer.empty()) {
        ck.params.for_each_tensor([&](const Matrix<float> &m) { ck.optimizer.push_back(AdamState<float>::like(m)); });
    }

    TrainResult result;
    const std::uint64_t steps = total_steps(config);
    if (ck.step >= steps) {
        result.final = std::move(ck);
        return result;
    }
    BatchStream stream(std::move(dataset), config.batch_size, config.seed);
    stream.seek(ck.stream_position);

    while (ck.step < steps) {
        const auto batch = stream.next();
        LossAndGradients<float> lg;
        try {
            lg = backward(ck.params, config, batch);
        } catch (const NonFiniteLoss &) {
            throw DivergedAtStep(ck.step);
        } catch (const NonFiniteGradient &) {
            throw DivergedAtStep(ck.step);
        }
        if (ck.step % config.log_every == 0 || ck.step + 1 == steps) {
            ck.loss_log.push_back({ck.step, lg.loss});
        }
        std::size_t t = 0;
        auto &grads = lg.grads;
        std::vector<Matrix<float> *> gptr;
        grads.for_each_tensor([&](Matrix<float> &m) { gptr.push_back(&m); });
        ck.params.for_each_tensor([&](Matrix<float> &m) {
            adam_step(m, *gptr[t], ck.optimizer[t], config.lr);
            ++t;
        });
        ck.step += 1;
        ck.stream_position = stream.position();
        if (config.checkpoint_every > 0 && ck.step % config.checkpoint_every == 0 && ck.step < steps) {
            if (options.on_checkpoint) {
                options.on_checkpoint(ck);
            }
            if (options.keep_intermediate) {
                result.intermediate.push_back(ck);
            }
        }
    }
    result.final = std::move(ck);
    return result;
}

inline TrainResult train(const CrosscoderConfig &config, const DatasetManifest &manifest,
                         const TrainOptions &options = {})
{
    return train(config, std::make_shared<const Dataset>(load_dataset(manifest)), options);
}

} // namespace xcoder

#endif
