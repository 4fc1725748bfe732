#ifndef XCODER_CROSSCODER_HPP
#define XCODER_CROSSCODER_HPP

// Sparse crosscoder over K in {2, 3} models sharing one feature space:
//
//   f(x)   = ReLU( sum_i W_enc^(i) a^(i)(x) + b_enc )
//   â^(i)  = W_dec^(i) f(x) + b_dec^(i)
//   L      = sum_i mean_x ||a^(i) - â^(i)||^2
//            + beta * mean_x sum_k f_k(x) sum_i ||W_dec,k^(i)||
//
// Encoders are stored d_sparse x d_model (row k feeds feature k); decoders
// d_model x d_sparse (column k is feature k's direction in model i).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "actstore.hpp"
#include "error.hpp"
#include "json.hpp"
#include "matrix.hpp"
#include "rng.hpp"

namespace xcoder {

inline constexpr double default_beta = 2.0;
inline constexpr std::size_t default_d_sparse = 32768;
inline constexpr double init_decoder_norm = 0.1;

enum class NormKind { L1, L2 };

inline std::string to_string(NormKind k) { return k == NormKind::L1 ? "L1" : "L2"; }

inline NormKind norm_kind_from_string(const std::string &s)
{
    if (s == "L1" || s == "l1") {
        return NormKind::L1;
    }
    if (s == "L2" || s == "l2") {
        return NormKind::L2;
    }
    throw ConfigError("norm_kind must be L1 or L2, got '" + s + "'");
}

struct CrosscoderConfig {
    std::vector<std::string> model_ids;
    std::size_t d_model = 0;
    std::size_t d_sparse = default_d_sparse;
    double beta = default_beta;
    double lr = 1e-4;
    std::size_t batch_size = default_batch_size;
    std::uint64_t total_tokens = 0;
    std::uint64_t seed = 0;
    std::uint64_t checkpoint_every = 0; // steps; 0 disables intermediate checkpoints
    std::uint64_t log_every = 1;        // steps between loss-log entries
    NormKind norm_kind = NormKind::L1;

    std::size_t n_models() const noexcept { return model_ids.size(); }

    std::size_t model_index(const std::string &id) const
    {
        for (std::size_t i = 0; i < model_ids.size(); ++i) {
            if (model_ids[i] == id) {
                return i;
            }
        }
        throw ModelSetMismatch("crosscoder has no model '" + id + "'");
    }

    friend bool operator==(const CrosscoderConfig &, const CrosscoderConfig &) = default;
};

inline void validate_config(const CrosscoderConfig &c)
{
    if (c.model_ids.size() != 2 && c.model_ids.size() != 3) {
        throw ConfigError("crosscoder supports 2 or 3 models, got "
                          + std::to_string(c.model_ids.size()));
    }
    for (std::size_t i = 0; i < c.model_ids.size(); ++i) {
        for (std::size_t j = i + 1; j < c.model_ids.size(); ++j) {
            if (c.model_ids[i] == c.model_ids[j]) {
                throw ConfigError("duplicate model id '" + c.model_ids[i] + "'");
            }
        }
    }
    if (c.d_model < 1) {
        throw ConfigError("d_model must be >= 1");
    }
    if (c.d_sparse < c.d_model) {
        throw ConfigError("d_sparse must be >= d_model");
    }
    if (!(c.beta >= 0.0)) {
        throw ConfigError("beta must be >= 0");
    }
    if (!(c.lr > 0.0)) {
        throw ConfigError("lr must be > 0");
    }
    if (c.batch_size < 1) {
        throw ConfigError("batch_size must be >= 1");
    }
    if (c.log_every < 1) {
        throw ConfigError("log_every must be >= 1");
    }
}

inline nlohmann::json config_to_json(const CrosscoderConfig &c)
{
    return {{"model_ids", c.model_ids},   {"d_model", c.d_model},
            {"d_sparse", c.d_sparse},     {"beta", c.beta},
            {"lr", c.lr},                 {"batch_size", c.batch_size},
            {"total_tokens", c.total_tokens}, {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every}, {"log_every", c.log_every},
            {"norm_kind", to_string(c.norm_kind)}};
}

inline CrosscoderConfig config_from_json(const nlohmann::json &j)
{
    CrosscoderConfig c;
    try {
        c.model_ids = j.at("model_ids").get<std::vector<std::string>>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.d_sparse = j.at("d_sparse").get<std::size_t>();
        c.beta = j.at("beta").get<double>();
        c.lr = j.at("lr").get<double>();
        c.batch_size = j.at("batch_size").get<std::size_t>();
        c.total_tokens = j.at("total_tokens").get<std::uint64_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.checkpoint_every = j.at("checkpoint_every").get<std::uint64_t>();
        c.log_every = j.at("log_every").get<std::uint64_t>();
        c.norm_kind = norm_kind_from_string(j.at("norm_kind").get<std::string>());
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(std::string("crosscoder config: ") + e.what());
    }
    return c;
}

template <typename T>
struct CrosscoderParams {
    std::vector<Matrix<T>> enc;     // per model, d_sparse x d_model
    Matrix<T> enc_bias;             // 1 x d_sparse, shared
    std::vector<Matrix<T>> dec;     // per model, d_model x d_sparse
    std::vector<Matrix<T>> dec_bias; // per model, 1 x d_model

    std::size_t n_models() const noexcept { return enc.size(); }
    std::size_t d_model() const noexcept { return dec.empty() ? 0 : dec[0].rows(); }
    std::size_t d_sparse() const noexcept { return enc_bias.cols(); }

    static CrosscoderParams zeros(std::size_t n_models, std::size_t d_model, std::size_t d_sparse)
    {
        CrosscoderParams p;
        p.enc.assign(n_models, Matrix<T>(d_sparse, d_model));
        p.enc_bias = Matrix<T>(1, d_sparse);
        p.dec.assign(n_models, Matrix<T>(d_model, d_sparse));
        p.dec_bias.assign(n_models, Matrix<T>(1, d_model));
        return p;
    }

    // Visits every tensor in canonical order: enc..., enc_bias, dec..., dec_bias...
    template <typename F>
    void for_each_tensor(F &&fn)
    {
        for (auto &m : enc) fn(m);
        fn(enc_bias);
        for (auto &m : dec) fn(m);
        for (auto &m : dec_bias) fn(m);
    }
    template <typename F>
    void for_each_tensor(F &&fn) const
    {
        for (const auto &m : enc) fn(m);
        fn(enc_bias);
        for (const auto &m : dec) fn(m);
        for (const auto &m : dec_bias) fn(m);
    }

    template <typename U>
    CrosscoderParams<U> cast() const
    {
        CrosscoderParams<U> out;
        for (const auto &m : enc) out.enc.push_back(m.template cast<U>());
        out.enc_bias = enc_bias.template cast<U>();
        for (const auto &m : dec) out.dec.push_back(m.template cast<U>());
        for (const auto &m : dec_bias) out.dec_bias.push_back(m.template cast<U>());
        return out;
    }

    friend bool operator==(const CrosscoderParams &, const CrosscoderParams &) = default;
};

template <typename T>
void validate_params(const CrosscoderParams<T> &p, const CrosscoderConfig &c)
{
    const std::size_t k = c.n_models();
    if (p.enc.size() != k || p.dec.size() != k || p.dec_bias.size() != k) {
        throw ModelSetMismatch("parameter tensors do not match the configured model count");
    }
    if (p.enc_bias.rows() != 1 || p.enc_bias.cols() != c.d_sparse) {
        throw InvalidShape("enc_bias must be 1 x d_sparse");
    }
    for (std::size_t i = 0; i < k; ++i) {
        if (p.enc[i].rows() != c.d_sparse || p.enc[i].cols() != c.d_model
            || p.dec[i].rows() != c.d_model || p.dec[i].cols() != c.d_sparse
            || p.dec_bias[i].rows() != 1 || p.dec_bias[i].cols() != c.d_model) {
            throw InvalidShape("parameter shapes for model '" + c.model_ids[i]
                               + "' do not match d_model/d_sparse");
        }
    }
}

template <typename T>
std::vector<double> flatten(const CrosscoderParams<T> &p)
{
    std::vector<double> out;
    p.for_each_tensor([&](const Matrix<T> &m) { out.insert(out.end(), m.flat().begin(), m.flat().end()); });
    return out;
}

template <typename T>
void unflatten(std::span<const double> flat, CrosscoderParams<T> &p)
{
    std::size_t pos = 0;
    p.for_each_tensor([&](Matrix<T> &m) {
        if (pos + m.size() > flat.size()) {
            throw InvalidShape("flat parameter vector too short");
        }
        for (auto &v : m.flat()) {
            v = static_cast<T>(flat[pos++]);
        }
    });
    if (pos != flat.size()) {
        throw InvalidShape("flat parameter vector too long");
    }
}

// Decoder column norms ||W_dec,k^(i)|| for every (model, feature), as doubles.
template <typename T>
std::vector<std::vector<double>> decoder_column_norms(const CrosscoderParams<T> &p, NormKind kind)
{
    std::vector<std::vector<double>> out(p.n_models(), std::vector<double>(p.d_sparse(), 0.0));
    for (std::size_t i = 0; i < p.n_models(); ++i) {
        const auto &dec = p.dec[i];
        for (std::size_t r = 0; r < dec.rows(); ++r) {
            const auto row = dec.row(r);
            for (std::size_t k = 0; k < row.size(); ++k) {
                const double v = row[k];
                out[i][k] += kind == NormKind::L1 ? std::abs(v) : v * v;
            }
        }
        if (kind == NormKind::L2) {
            for (auto &v : out[i]) {
                v = std::sqrt(v);
            }
        }
    }
    return out;
}

// Sphere-uniform decoder columns at norm 0.1, encoders tied to the decoder
// transposes, zero biases.
template <typename T = float>
CrosscoderParams<T> init_params(const CrosscoderConfig &config, Rng &rng)
{
    validate_config(config);
    auto p = CrosscoderParams<T>::zeros(config.n_models(), config.d_model, config.d_sparse);
    std::vector<double> v(config.d_model);
    for (std::size_t i = 0; i < config.n_models(); ++i) {
        for (std::size_t k = 0; k < config.d_sparse; ++k) {
            double n2 = 0.0;
            do {
                n2 = 0.0;
                for (auto &x : v) {
                    x = rng.normal();
                    n2 += x * x;
                }
            } while (n2 == 0.0);
            const double s = init_decoder_norm / std::sqrt(n2);
            for (std::size_t d = 0; d < config.d_model; ++d) {
                const T val = static_cast<T>(v[d] * s);
                p.dec[i](d, k) = val;
                p.enc[i](k, d) = val;
            }
        }
    }
    return p;
}

template <typename T>
struct ForwardCache {
    Matrix<T> pre_activation;          // batch x d_sparse
    Matrix<T> features;                // batch x d_sparse, ReLU(pre_activation)
    std::vector<Matrix<T>> reconstructions; // per model, batch x d_model
};

struct LossBreakdown {
    std::vector<double> recon_per_model; // aligned with CrosscoderConfig::model_ids
    double sparsity = 0.0;
    double total = 0.0;

    double recon_total() const
    {
        return std::accumulate(recon_per_model.begin(), recon_per_model.end(), 0.0);
    }
};

namespace detail {

template <typename T>
void check_acts(const CrosscoderParams<T> &p, std::span<const Matrix<T>> acts)
{
    if (acts.size() != p.n_models()) {
        throw ModelSetMismatch("got activations for " + std::to_string(acts.size())
                               + " models, crosscoder has " + std::to_string(p.n_models()));
    }
    for (const auto &a : acts) {
        if (a.cols() != p.d_model() || a.rows() != acts[0].rows()) {
            throw InvalidShape("activation batch " + shape_str(a.rows(), a.cols())
                               + " does not fit d_model " + std::to_string(p.d_model()));
        }
    }
}

// Double-precision dot product in four fixed lanes: vectorizable, and the
// summation order depends only on n.
template <typename A, typename B>
double dot_f64(const A *a, const B *b, std::size_t n)
{
    double s[4] = {0.0, 0.0, 0.0, 0.0};
    std::size_t d = 0;
    for (; d + 4 <= n; d += 4) {
        for (std::size_t l = 0; l < 4; ++l) {
            s[l] += static_cast<double>(a[d + l]) * static_cast<double>(b[d + l]);
        }
    }
    for (; d < n; ++d) {
        s[0] += static_cast<double>(a[d]) * static_cast<double>(b[d]);
    }
    return (s[0] + s[1]) + (s[2] + s[3]);
}

// Pre-activation of one token: b_enc + sum_i W_enc^(i) a^(i), over the given
// model subset.
template <typename T>
void pre_activation_row(const CrosscoderParams<T> &p, std::span<const Matrix<T>> acts,
                        std::span<const std::size_t> models, std::size_t b, std::span<T> out)
{
    const std::size_t ds = p.d_sparse();
    const std::size_t dm = p.d_model();
    for (std::size_t k = 0; k < ds; ++k) {
        double acc = p.enc_bias(0, k);
        for (std::size_t i : models) {
            acc += dot_f64(p.enc[i].data() + k * dm, acts[i].data() + b * dm, dm);
        }
        out[k] = static_cast<T>(acc);
    }
}

} // namespace detail

template <typename T>
Matrix<T> encode(const CrosscoderParams<T> &p, std::span<const Matrix<T>> acts,
                 Matrix<T> *pre_out = nullptr)
{
    detail::check_acts(p, acts);
    const std::size_t n = acts[0].rows();
    std::vector<std::size_t> all(p.n_models());
    std::iota(all.begin(), all.end(), std::size_t{0});
    Matrix<T> pre(n, p.d_sparse());
    for (std::size_t b = 0; b < n; ++b) {
        detail::pre_activation_row(p, acts, std::span<const std::size_t>(all), b, pre.row(b));
    }
    Matrix<T> f = pre;
    for (auto &v : f.flat()) {
        v = v > T{0} ? v : T{0};
    }
    if (pre_out) {
        *pre_out = std::move(pre);
    }
    return f;
}

// Rearranges a batch into the crosscoder's model order.
template <typename T>
std::vector<Matrix<T>> ordered_acts(const CrosscoderConfig &config, const AlignedBatch &batch)
{
    if (batch.models.size() != config.n_models()) {
        throw ModelSetMismatch("batch has " + std::to_string(batch.models.size())
                               + " models, crosscoder has " + std::to_string(config.n_models()));
    }
    std::vector<Matrix<T>> out;
    for (const auto &id : config.model_ids) {
        auto it = std::find(batch.models.begin(), batch.models.end(), id);
        if (it == batch.models.end()) {
            throw ModelSetMismatch("batch lacks model '" + id + "'");
        }
        const auto &m = batch.acts[static_cast<std::size_t>(it - batch.models.begin())];
        if constexpr (std::is_same_v<T, float>) {
            out.push_back(m);
        } else {
            out.push_back(m.template cast<T>());
        }
    }
    return out;
}

template <typename T>
Matrix<T> encode(const CrosscoderParams<T> &p, const CrosscoderConfig &config, const AlignedBatch &batch)
{
    const auto acts = ordered_acts<T>(config, batch);
    return encode(p, std::span<const Matrix<T>>(acts));
}

// Single-branch encoding: ReLU(W_enc^(m) a + b_enc), other branches absent.
template <typename T>
Matrix<T> encode_single(const CrosscoderParams<T> &p, const CrosscoderConfig &config,
                        const std::string &model_id, const Matrix<T> &acts)
{
    const std::size_t m = config.model_index(model_id);
    if (acts.cols() != p.d_model()) {
        throw InvalidShape("activations have " + std::to_string(acts.cols())
                           + " columns, crosscoder d_model is " + std::to_string(p.d_model()));
    }
    // Only slot m is read by pre_activation_row; the other slots just need to exist.
    std::vector<Matrix<T>> slots(p.n_models());
    slots[m] = acts;
    const std::size_t idx[1] = {m};
    Matrix<T> f(acts.rows(), p.d_sparse());
    for (std::size_t b = 0; b < acts.rows(); ++b) {
        detail::pre_activation_row(p, std::span<const Matrix<T>>(slots), std::span<const std::size_t>(idx), b, f.row(b));
    }
    for (auto &v : f.flat()) {
        v = v > T{0} ? v : T{0};
    }
    return f;
}

template <typename T>
std::vector<Matrix<T>> decode(const CrosscoderParams<T> &p, const Matrix<T> &features)
{
    if (features.cols() != p.d_sparse()) {
        throw InvalidShape("feature width " + std::to_string(features.cols()) + " != d_sparse "
                           + std::to_string(p.d_sparse()));
    }
    const std::size_t n = features.rows();
    const std::size_t dm = p.d_model();
    std::vector<Matrix<T>> out;
    std::vector<double> acc(dm);
    for (std::size_t i = 0; i < p.n_models(); ++i) {
        const auto dec_t = transpose(p.dec[i]);
        Matrix<T> r(n, dm);
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t d = 0; d < dm; ++d) {
                acc[d] = p.dec_bias[i](0, d);
            }
            const auto f = features.row(b);
            for (std::size_t k = 0; k < f.size(); ++k) {
                if (f[k] == T{0}) {
                    continue;
                }
                const double fk = f[k];
                const auto col = dec_t.row(k);
                for (std::size_t d = 0; d < dm; ++d) {
                    acc[d] += fk * static_cast<double>(col[d]);
                }
            }
            for (std::size_t d = 0; d < dm; ++d) {
                r(b, d) = static_cast<T>(acc[d]);
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

template <typename T>
struct LossAndGradients {
    LossBreakdown loss;
    CrosscoderParams<T> grads;
};

namespace detail {

// Shared forward (and optionally backward) pass. Reductions accumulate in
// double in a fixed order, so results depend only on inputs and build.
template <typename T>
LossBreakdown run_pass(const CrosscoderParams<T> &p, const CrosscoderConfig &config,
                       std::span<const Matrix<T>> acts, ForwardCache<T> *cache,
                       CrosscoderParams<T> *grads)
{
    check_acts(p, acts);
    const std::size_t n = acts[0].rows();
    const std::size_t nm = p.n_models();
    const std::size_t dm = p.d_model();
    const std::size_t ds = p.d_sparse();
    if (n == 0) {
        throw InvalidShape("empty batch");
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    const double beta = config.beta;

    const auto norms = decoder_column_norms(p, config.norm_kind);
    std::vector<double> norm_sum(ds, 0.0);
    for (std::size_t i = 0; i < nm; ++i) {
        for (std::size_t k = 0; k < ds; ++k) {
            norm_sum[k] += norms[i][k];
        }
    }
    std::vector<Matrix<T>> dec_t;
    for (const auto &d : p.dec) {
        dec_t.push_back(transpose(d));
    }

    std::vector<std::size_t> all(nm);
    std::iota(all.begin(), all.end(), std::size_t{0});

    if (cache) {
        cache->pre_activation = Matrix<T>(n, ds);
        cache->features = Matrix<T>(n, ds);
        cache->reconstructions.assign(nm, Matrix<T>(n, dm));
    }

    // Gradient accumulators (double), decoder kept transposed: [k][d].
    std::vector<std::vector<double>> g_enc, g_dec_t, g_dec_bias;
    std::vector<double> g_enc_bias, feature_mass;
    if (grads) {
        g_enc.assign(nm, std::vector<double>(ds * dm, 0.0));
        g_dec_t.assign(nm, std::vector<double>(ds * dm, 0.0));
        g_dec_bias.assign(nm, std::vector<double>(dm, 0.0));
        g_enc_bias.assign(ds, 0.0);
        feature_mass.assign(ds, 0.0);
    }

    std::vector<double> recon_sum(nm, 0.0);
    double sparsity_sum = 0.0;
    std::vector<T> pre(ds);
    std::vector<std::size_t> active;
    std::vector<double> fval;
    std::vector<std::vector<double>> resid(nm, std::vector<double>(dm));
    std::vector<double> dfeat;

    for (std::size_t b = 0; b < n; ++b) {
        pre_activation_row(p, acts, std::span<const std::size_t>(all), b, std::span<T>(pre));
        active.clear();
        fval.clear();
        double token_sparsity = 0.0;
        for (std::size_t k = 0; k < ds; ++k) {
            if (pre[k] > T{0}) {
                active.push_back(k);
                fval.push_back(static_cast<double>(pre[k]));
                token_sparsity += static_cast<double>(pre[k]) * norm_sum[k];
            }
        }
        sparsity_sum += token_sparsity;
        if (cache) {
            auto pr = cache->pre_activation.row(b);
            auto fr = cache->features.row(b);
            for (std::size_t k = 0; k < ds; ++k) {
                pr[k] = pre[k];
                fr[k] = pre[k] > T{0} ? pre[k] : T{0};
            }
        }
        for (std::size_t i = 0; i < nm; ++i) {
            auto &r = resid[i];
            for (std::size_t d = 0; d < dm; ++d) {
                r[d] = p.dec_bias[i](0, d);
            }
            for (std::size_t a = 0; a < active.size(); ++a) {
                const T *col = dec_t[i].data() + active[a] * dm;
                const double fk = fval[a];
                for (std::size_t d = 0; d < dm; ++d) {
                    r[d] += fk * static_cast<double>(col[d]);
                }
            }
            if (cache) {
                auto out = cache->reconstructions[i].row(b);
                for (std::size_t d = 0; d < dm; ++d) {
                    out[d] = static_cast<T>(r[d]);
                }
            }
            const auto x = acts[i].row(b);
            double sq = 0.0;
            for (std::size_t d = 0; d < dm; ++d) {
                r[d] -= static_cast<double>(x[d]); // residual â - a
                sq += r[d] * r[d];
            }
            recon_sum[i] += sq;
        }
        if (!grads) {
            continue;
        }
        // dL/dâ^(i) = (2/n) r^(i)
        dfeat.assign(active.size(), 0.0);
        for (std::size_t i = 0; i < nm; ++i) {
            const auto &r = resid[i];
            for (std::size_t d = 0; d < dm; ++d) {
                g_dec_bias[i][d] += 2.0 * inv_n * r[d];
            }
            for (std::size_t a = 0; a < active.size(); ++a) {
                const std::size_t k = active[a];
                const T *col = dec_t[i].data() + k * dm;
                double *gcol = g_dec_t[i].data() + k * dm;
                const double scale = 2.0 * inv_n * fval[a];
                for (std::size_t d = 0; d < dm; ++d) {
                    gcol[d] += scale * r[d];
                }
                dfeat[a] += 2.0 * inv_n * dot_f64(r.data(), col, dm);
            }
        }
        for (std::size_t a = 0; a < active.size(); ++a) {
            const std::size_t k = active[a];
            const double g = dfeat[a] + beta * inv_n * norm_sum[k];
            feature_mass[k] += fval[a];
            g_enc_bias[k] += g;
            for (std::size_t i = 0; i < nm; ++i) {
                double *ge = g_enc[i].data() + k * dm;
                const auto x = acts[i].row(b);
                for (std::size_t d = 0; d < dm; ++d) {
                    ge[d] += g * static_cast<double>(x[d]);
                }
            }
        }
    }

    LossBreakdown lb;
    lb.recon_per_model.resize(nm);
    for (std::size_t i = 0; i < nm; ++i) {
        lb.recon_per_model[i] = recon_sum[i] * inv_n;
    }
    lb.sparsity = sparsity_sum * inv_n;
    lb.total = lb.recon_total() + beta * lb.sparsity;
    if (!std::isfinite(lb.total)) {
        throw NonFiniteLoss("crosscoder loss is not finite");
    }

    if (grads) {
        *grads = CrosscoderParams<T>::zeros(nm, dm, ds);
        for (std::size_t i = 0; i < nm; ++i) {
            // Sparsity path into the decoder: beta * (sum_x f_k / n) * d||W_dec,k^(i)||.
            for (std::size_t k = 0; k < ds; ++k) {
                const double mass = beta * inv_n * feature_mass[k];
                if (mass == 0.0) {
                    continue;
                }
                const T *col = dec_t[i].data() + k * dm;
                double *gcol = g_dec_t[i].data() + k * dm;
                if (config.norm_kind == NormKind::L1) {
                    for (std::size_t d = 0; d < dm; ++d) {
                        const double v = col[d];
                        gcol[d] += mass * static_cast<double>((v > 0.0) - (v < 0.0));
                    }
                } else if (norms[i][k] > 0.0) {
                    for (std::size_t d = 0; d < dm; ++d) {
                        gcol[d] += mass * static_cast<double>(col[d]) / norms[i][k];
                    }
                }
            }
            auto &ge = grads->enc[i];
            auto &gd = grads->dec[i];
            for (std::size_t k = 0; k < ds; ++k) {
                for (std::size_t d = 0; d < dm; ++d) {
                    ge(k, d) = static_cast<T>(g_enc[i][k * dm + d]);
                    gd(d, k) = static_cast<T>(g_dec_t[i][k * dm + d]);
                }
            }
            for (std::size_t d = 0; d < dm; ++d) {
                grads->dec_bias[i](0, d) = static_cast<T>(g_dec_bias[i][d]);
            }
        }
        for (std::size_t k = 0; k < ds; ++k) {
            grads->enc_bias(0, k) = static_cast<T>(g_enc_bias[k]);
        }
        bool finite = true;
        grads->for_each_tensor([&](const Matrix<T> &m) { finite = finite && all_finite(m); });
        if (!finite) {
            throw NonFiniteGradient("crosscoder gradient has non-finite entries");
        }
    }
    return lb;
}

} // namespace detail

template <typename T>
LossBreakdown loss(const CrosscoderParams<T> &p, const CrosscoderConfig &config,
                   std::span<const Matrix<T>> acts, ForwardCache<T> *cache = nullptr)
{
    return detail::run_pass<T>(p, config, acts, cache, nullptr);
}

template <typename T>
LossBreakdown loss(const CrosscoderParams<T> &p, const CrosscoderConfig &config,
                   const AlignedBatch &batch, ForwardCache<T> *cache = nullptr)
{
    const auto acts = ordered_acts<T>(config, batch);
    return loss(p, config, std::span<const Matrix<T>>(acts), cache);
}

template <typename T>
LossAndGradients<T> backward(const CrosscoderParams<T> &p, const CrosscoderConfig &config,
                             std::span<const Matrix<T>> acts)
{
    LossAndGradients<T> out;
    out.loss = detail::run_pass<T>(p, config, acts, nullptr, &out.grads);
    return out;
}

template <typename T>
LossAndGradients<T> backward(const CrosscoderParams<T> &p, const CrosscoderConfig &config,
                             const AlignedBatch &batch)
{
    const auto acts = ordered_acts<T>(config, batch);
    return backward(p, config, std::span<const Matrix<T>>(acts));
}

// Applies the same feature permutation to encoder rows, encoder bias, and
// decoder columns: new feature j is old feature perm[j].
template <typename T>
CrosscoderParams<T> permute_features(const CrosscoderParams<T> &p, std::span<const std::size_t> perm)
{
    auto out = p;
    for (std::size_t j = 0; j < perm.size(); ++j) {
        const std::size_t k = perm[j];
        out.enc_bias(0, j) = p.enc_bias(0, k);
        for (std::size_t i = 0; i < p.n_models(); ++i) {
            for (std::size_t d = 0; d < p.d_model(); ++d) {
                out.enc[i](j, d) = p.enc[i](k, d);
                out.dec[i](d, j) = p.dec[i](d, k);
            }
        }
    }
    return out;
}

// Fraction of tokens on which each feature exceeds `threshold`.
template <typename T>
std::vector<double> dead_feature_stats(const CrosscoderParams<T> &p, const CrosscoderConfig &config,
                                       std::span<const AlignedBatch> batches, double threshold)
{
    if (!(threshold >= 0.0)) {
        throw ConfigError("threshold must be >= 0");
    }
    std::vector<std::uint64_t> counts(p.d_sparse(), 0);
    std::uint64_t tokens = 0;
    for (const auto &batch : batches) {
        const auto f = encode(p, config, batch);
        for (std::size_t b = 0; b < f.rows(); ++b) {
            const auto row = f.row(b);
            for (std::size_t k = 0; k < row.size(); ++k) {
                counts[k] += static_cast<double>(row[k]) > threshold;
            }
        }
        tokens += f.rows();
    }
    std::vector<double> freq(p.d_sparse(), 0.0);
    if (tokens > 0) {
        for (std::size_t k = 0; k < freq.size(); ++k) {
            freq[k] = static_cast<double>(counts[k]) / static_cast<double>(tokens);
        }
    }
    return freq;
}

} // namespace xcoder

#endif
