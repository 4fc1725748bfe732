#ifndef XCODER_ACTSTORE_HPP
#define XCODER_ACTSTORE_HPP

// On-disk activation shards, dataset manifests, and aligned shuffled batching.
//
// Shard layout (all integers little-endian):
//   "ACTS" | u32 version | u32 len + UTF-8 model_id | u32 layer_index |
//   u32 d_model | u64 n_tokens | u8 dtype_code (0 = f32) |
//   n_tokens*d_model f32 row-major | u64 meta_len | meta_len bytes UTF-8 JSON

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "json.hpp"
#include "matrix.hpp"
#include "rng.hpp"

namespace xcoder {

static_assert(std::endian::native == std::endian::little,
              "shard I/O assumes a little-endian host");

inline constexpr char shard_magic[4] = {'A', 'C', 'T', 'S'};
inline constexpr std::uint32_t shard_version = 1;
inline constexpr std::size_t default_batch_size = 1024;

enum class DType : std::uint8_t { f32 = 0 };

struct ShardHeader {
    std::uint32_t version = shard_version;
    std::string model_id;
    std::uint32_t layer_index = 0;
    std::uint32_t d_model = 0;
    std::uint64_t n_tokens = 0;
    DType dtype = DType::f32;

    friend bool operator==(const ShardHeader &, const ShardHeader &) = default;
};

struct TokenMeta {
    std::string sample_id;
    std::int64_t position = 0;
    bool is_final_token = false;

    friend bool operator==(const TokenMeta &, const TokenMeta &) = default;
};

struct ActivationShard {
    ShardHeader header;
    Matrix<float> data;
    std::optional<std::vector<TokenMeta>> token_meta;
    // Free-form provenance (capture point, corpus, ...). Kept next to the
    // token records in the JSON block.
    nlohmann::json attributes = nlohmann::json::object();

    std::size_t n_tokens() const noexcept { return data.rows(); }
    std::size_t d_model() const noexcept { return data.cols(); }

    friend bool operator==(const ActivationShard &a, const ActivationShard &b)
    {
        return a.header == b.header && a.data == b.data && a.token_meta == b.token_meta
               && a.attributes == b.attributes;
    }
};

namespace detail {

class ByteWriter {
public:
    template <typename T>
    void put(T v)
    {
        char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        out_.append(buf, sizeof(T));
    }
    void put_bytes(const void *p, std::size_t n) { out_.append(static_cast<const char *>(p), n); }
    void put_string(std::string_view s)
    {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        put_bytes(s.data(), s.size());
    }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class ByteReader {
public:
    ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <typename T>
    T get()
    {
        T v;
        std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
        return v;
    }
    std::string_view take(std::size_t n)
    {
        if (n > bytes_.size() - pos_) {
            throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_) + " (need "
                              + std::to_string(n) + " more)");
        }
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string get_string() { return std::string(take(get<std::uint32_t>())); }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
    std::size_t position() const noexcept { return pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
    std::string what_;
};

inline std::string read_file(const std::filesystem::path &path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        throw IoError("read failed on '" + path.string() + "'");
    }
    return bytes;
}

inline void write_file(const std::filesystem::path &path, std::string_view bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
        throw IoError("write failed on '" + path.string() + "'");
    }
}

inline nlohmann::json meta_to_json(const std::vector<TokenMeta> &meta)
{
    nlohmann::json ids = nlohmann::json::array();
    nlohmann::json pos = nlohmann::json::array();
    nlohmann::json fin = nlohmann::json::array();
    for (const auto &m : meta) {
        ids.push_back(m.sample_id);
        pos.push_back(m.position);
        fin.push_back(m.is_final_token);
    }
    return {{"sample_id", std::move(ids)}, {"position", std::move(pos)}, {"is_final_token", std::move(fin)}};
}

inline std::vector<TokenMeta> meta_from_json(const nlohmann::json &j)
{
    const auto &ids = j.at("sample_id");
    const auto &pos = j.at("position");
    const auto &fin = j.at("is_final_token");
    if (ids.size() != pos.size() || ids.size() != fin.size()) {
        throw FormatError("token metadata columns have different lengths");
    }
    std::vector<TokenMeta> out(ids.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = {ids[i].get<std::string>(), pos[i].get<std::int64_t>(), fin[i].get<bool>()};
    }
    return out;
}

} // namespace detail

inline void validate_shard(const ShardHeader &header, const Matrix<float> &data,
                           const std::optional<std::vector<TokenMeta>> &meta)
{
    if (header.d_model < 1 || header.n_tokens < 1) {
        throw InvalidShape("shard header needs n_tokens >= 1 and d_model >= 1");
    }
    if (data.rows() != header.n_tokens || data.cols() != header.d_model) {
        throw InvalidShape("shard data is " + shape_str(data.rows(), data.cols())
                           + " but header says " + shape_str(header.n_tokens, header.d_model));
    }
    if (meta && meta->size() != header.n_tokens) {
        throw InvalidShape("token_meta has " + std::to_string(meta->size()) + " records for "
                           + std::to_string(header.n_tokens) + " tokens");
    }
}

inline std::string encode_shard(const ActivationShard &shard)
{
    validate_shard(shard.header, shard.data, shard.token_meta);
    detail::ByteWriter w;
    w.put_bytes(shard_magic, 4);
    w.put<std::uint32_t>(shard.header.version);
    w.put_string(shard.header.model_id);
    w.put<std::uint32_t>(shard.header.layer_index);
    w.put<std::uint32_t>(shard.header.d_model);
    w.put<std::uint64_t>(shard.header.n_tokens);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(shard.header.dtype));
    w.put_bytes(shard.data.data(), shard.data.size() * sizeof(float));
    std::string meta;
    if (shard.token_meta || !shard.attributes.empty()) {
        nlohmann::json j = nlohmann::json::object();
        if (!shard.attributes.empty()) {
            j["attributes"] = shard.attributes;
        }
        if (shard.token_meta) {
            j["tokens"] = detail::meta_to_json(*shard.token_meta);
        }
        meta = j.dump();
    }
    w.put<std::uint64_t>(meta.size());
    w.put_bytes(meta.data(), meta.size());
    return w.take();
}

// Parses one shard from the front of `reader`, leaving the cursor after it.
inline ActivationShard decode_shard(detail::ByteReader &r)
{
    ActivationShard s;
    if (r.take(4) != std::string_view(shard_magic, 4)) {
        throw FormatError("bad magic, expected \"ACTS\"");
    }
    s.header.version = r.get<std::uint32_t>();
    if (s.header.version != shard_version) {
        throw FormatError("unsupported shard version " + std::to_string(s.header.version));
    }
    s.header.model_id = r.get_string();
    s.header.layer_index = r.get<std::uint32_t>();
    s.header.d_model = r.get<std::uint32_t>();
    s.header.n_tokens = r.get<std::uint64_t>();
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 0) {
        throw FormatError("unsupported dtype code " + std::to_string(dtype));
    }
    if (s.header.n_tokens < 1 || s.header.d_model < 1) {
        throw FormatError("header declares an empty shard");
    }
    const std::uint64_t count = s.header.n_tokens * s.header.d_model;
    if (count > r.remaining() / sizeof(float)) {
        throw FormatError("payload shorter than n_tokens*d_model*4 bytes");
    }
    std::vector<float> values(count);
    std::memcpy(values.data(), r.take(count * sizeof(float)).data(), count * sizeof(float));
    s.data = Matrix<float>(s.header.n_tokens, s.header.d_model, std::move(values));
    const auto meta_len = r.get<std::uint64_t>();
    if (meta_len > r.remaining()) {
        throw FormatError("metadata block truncated");
    }
    const auto meta = r.take(meta_len);
    if (!meta.empty()) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(meta);
            if (j.contains("attributes")) {
                s.attributes = j.at("attributes");
            }
            if (j.contains("tokens")) {
                s.token_meta = detail::meta_from_json(j.at("tokens"));
            }
        } catch (const nlohmann::json::exception &e) {
            throw FormatError(std::string("metadata JSON: ") + e.what());
        }
        if (s.token_meta && s.token_meta->size() != s.header.n_tokens) {
            throw FormatError("metadata token count does not match n_tokens");
        }
    }
    return s;
}

inline ActivationShard decode_shard(std::string_view bytes)
{
    detail::ByteReader r(bytes, "shard");
    auto s = decode_shard(r);
    if (r.remaining() != 0) {
        throw FormatError("trailing bytes after metadata block");
    }
    return s;
}

inline std::filesystem::path write_shard(const ShardHeader &header, const Matrix<float> &data,
                                         const std::optional<std::vector<TokenMeta>> &meta,
                                         const std::filesystem::path &path)
{
    ActivationShard s{header, data, meta};
    detail::write_file(path, encode_shard(s));
    return path;
}

inline std::filesystem::path write_shard(const ActivationShard &shard,
                                         const std::filesystem::path &path)
{
    detail::write_file(path, encode_shard(shard));
    return path;
}

inline ActivationShard read_shard(const std::filesystem::path &path)
{
    const auto bytes = detail::read_file(path);
    try {
        return decode_shard(bytes);
    } catch (const FormatError &e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline ActivationShard make_shard(std::string model_id, Matrix<float> data,
                                  std::optional<std::vector<TokenMeta>> meta = std::nullopt,
                                  std::uint32_t layer_index = 0)
{
    ActivationShard s;
    s.header.model_id = std::move(model_id);
    s.header.layer_index = layer_index;
    s.header.d_model = static_cast<std::uint32_t>(data.cols());
    s.header.n_tokens = data.rows();
    s.data = std::move(data);
    s.token_meta = std::move(meta);
    validate_shard(s.header, s.data, s.token_meta);
    return s;
}

// Scale c with mean_t ||c * a_t||_2 = sqrt(d_model). Uses every row when the
// shards hold at most sample_size tokens, otherwise an even stride.
inline double estimate_scale(std::span<const ActivationShard *const> shards, std::size_t sample_size)
{
    if (shards.empty()) {
        throw ConfigError("estimate_scale needs at least one shard");
    }
    if (sample_size < 1) {
        throw ConfigError("estimate_scale needs sample_size >= 1");
    }
    const std::size_t d = shards.front()->d_model();
    std::size_t total = 0;
    for (const auto *s : shards) {
        if (s->d_model() != d) {
            throw InvalidShape("estimate_scale: shards disagree on d_model");
        }
        total += s->n_tokens();
    }
    const std::size_t take = std::min(sample_size, total);
    double norm_sum = 0.0;
    std::size_t shard_i = 0;
    std::size_t shard_start = 0;
    for (std::size_t i = 0; i < take; ++i) {
        const std::size_t global = static_cast<std::size_t>((static_cast<unsigned __int128>(i) * total) / take);
        while (global >= shard_start + shards[shard_i]->n_tokens()) {
            shard_start += shards[shard_i]->n_tokens();
            ++shard_i;
        }
        norm_sum += l2_norm(shards[shard_i]->data.row(global - shard_start));
    }
    const double mean = norm_sum / static_cast<double>(take);
    if (!(mean > 0.0) || !std::isfinite(mean)) {
        throw DegenerateScale("mean activation norm is " + std::to_string(mean));
    }
    return std::sqrt(static_cast<double>(d)) / mean;
}

inline double estimate_scale(const std::vector<ActivationShard> &shards, std::size_t sample_size)
{
    std::vector<const ActivationShard *> ptrs;
    for (const auto &s : shards) {
        ptrs.push_back(&s);
    }
    return estimate_scale(std::span<const ActivationShard *const>(ptrs), sample_size);
}

// ---------------------------------------------------------------------------
// Manifests

inline constexpr int manifest_schema_version = 1;

struct DatasetManifest {
    std::vector<std::string> models;
    std::vector<std::vector<std::string>> shard_groups; // paths relative to base_dir
    std::optional<std::map<std::string, double>> normalization;
    std::vector<std::string> source_tags;
    std::filesystem::path base_dir; // not serialized; set by load_manifest

    friend bool operator==(const DatasetManifest &a, const DatasetManifest &b)
    {
        return a.models == b.models && a.shard_groups == b.shard_groups
               && a.normalization == b.normalization && a.source_tags == b.source_tags;
    }
};

inline void validate_manifest(const DatasetManifest &m)
{
    if (m.models.empty()) {
        throw ConfigError("manifest lists no models");
    }
    if (m.shard_groups.empty()) {
        throw ConfigError("manifest lists no shard groups");
    }
    for (const auto &g : m.shard_groups) {
        if (g.size() != m.models.size()) {
            throw ConfigError("shard group has " + std::to_string(g.size()) + " entries for "
                              + std::to_string(m.models.size()) + " models");
        }
    }
    if (m.normalization) {
        for (const auto &model : m.models) {
            auto it = m.normalization->find(model);
            if (it == m.normalization->end()) {
                throw ConfigError("normalization has no scale for model '" + model + "'");
            }
            if (!(it->second > 0.0) || !std::isfinite(it->second)) {
                throw ConfigError("normalization scale for '" + model + "' must be positive");
            }
        }
    }
}

inline nlohmann::json manifest_to_json(const DatasetManifest &m)
{
    nlohmann::json j;
    j["schema_version"] = manifest_schema_version;
    j["models"] = m.models;
    j["shard_groups"] = m.shard_groups;
    j["normalization"] = m.normalization ? nlohmann::json(*m.normalization) : nlohmann::json(nullptr);
    j["source_tags"] = m.source_tags;
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json &j)
{
    DatasetManifest m;
    try {
        m.models = j.at("models").get<std::vector<std::string>>();
        m.shard_groups = j.at("shard_groups").get<std::vector<std::vector<std::string>>>();
        if (j.contains("normalization") && !j.at("normalization").is_null()) {
            m.normalization = j.at("normalization").get<std::map<std::string, double>>();
        }
        if (j.contains("source_tags")) {
            m.source_tags = j.at("source_tags").get<std::vector<std::string>>();
        }
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(std::string("manifest: ") + e.what());
    }
    validate_manifest(m);
    return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path &path)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::parse_error &e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    auto m = manifest_from_json(j);
    m.base_dir = path.parent_path();
    return m;
}

inline void save_manifest(const DatasetManifest &m, const std::filesystem::path &path)
{
    validate_manifest(m);
    detail::write_file(path, manifest_to_json(m).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// In-memory dataset and batching

// Shards resident in memory, grouped token-aligned across models.
struct Dataset {
    std::vector<std::string> models;
    std::vector<std::vector<ActivationShard>> groups; // groups[g][model index]
    std::vector<double> scales;                       // per model, 1.0 when unnormalized
    std::vector<std::string> source_tags;

    std::size_t d_model() const { return groups.at(0).at(0).d_model(); }
    std::size_t n_tokens() const
    {
        std::size_t n = 0;
        for (const auto &g : groups) {
            n += g.at(0).n_tokens();
        }
        return n;
    }
    std::size_t model_index(const std::string &id) const
    {
        for (std::size_t i = 0; i < models.size(); ++i) {
            if (models[i] == id) {
                return i;
            }
        }
        throw ModelSetMismatch("dataset has no model '" + id + "'");
    }
};

inline void validate_dataset(const Dataset &ds)
{
    if (ds.models.empty() || ds.groups.empty()) {
        throw ConfigError("dataset is empty");
    }
    if (ds.scales.size() != ds.models.size()) {
        throw ConfigError("dataset needs one scale per model");
    }
    const std::size_t d = ds.groups[0].at(0).d_model();
    for (const auto &g : ds.groups) {
        if (g.size() != ds.models.size()) {
            throw ConfigError("shard group size does not match model count");
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (g[i].header.model_id != ds.models[i]) {
                throw ModelSetMismatch("shard model_id '" + g[i].header.model_id
                                       + "' in slot of model '" + ds.models[i] + "'");
            }
            if (g[i].d_model() != d) {
                throw InvalidShape("shards disagree on d_model");
            }
            if (g[i].n_tokens() != g[0].n_tokens()) {
                throw InvalidShape("aligned shards disagree on n_tokens");
            }
            if (g[i].token_meta != g[0].token_meta) {
                throw ConfigError("aligned shards disagree on token metadata");
            }
        }
    }
}

inline Dataset load_dataset(const DatasetManifest &m)
{
    validate_manifest(m);
    Dataset ds;
    ds.models = m.models;
    ds.source_tags = m.source_tags;
    for (const auto &g : m.shard_groups) {
        std::vector<ActivationShard> group;
        for (const auto &p : g) {
            group.push_back(read_shard(m.base_dir / p));
        }
        ds.groups.push_back(std::move(group));
    }
    ds.scales.assign(m.models.size(), 1.0);
    if (m.normalization) {
        for (std::size_t i = 0; i < m.models.size(); ++i) {
            ds.scales[i] = m.normalization->at(m.models[i]);
        }
    }
    validate_dataset(ds);
    return ds;
}

// Per-model scale factors bringing mean row norm to sqrt(d_model).
inline std::map<std::string, double> compute_normalization(const Dataset &ds, std::size_t sample_size)
{
    std::map<std::string, double> out;
    for (std::size_t i = 0; i < ds.models.size(); ++i) {
        std::vector<const ActivationShard *> shards;
        for (const auto &g : ds.groups) {
            shards.push_back(&g[i]);
        }
        out[ds.models[i]] = estimate_scale(std::span<const ActivationShard *const>(shards), sample_size);
    }
    return out;
}

inline void apply_normalization(Dataset &ds, const std::map<std::string, double> &scales)
{
    for (std::size_t i = 0; i < ds.models.size(); ++i) {
        ds.scales[i] = scales.at(ds.models[i]);
    }
}

struct AlignedBatch {
    std::vector<Matrix<float>> acts; // one batch_size x d_model matrix per model
    std::vector<TokenMeta> token_meta; // empty when the dataset has none
    std::vector<std::uint64_t> token_index; // global token ids, for bookkeeping
    std::vector<std::string> models;

    std::size_t size() const noexcept { return acts.empty() ? 0 : acts.front().rows(); }
};

// Deterministic epoch-wise shuffled stream over a Dataset. Each epoch is a
// fresh Fisher-Yates permutation seeded by (seed, epoch); the final batch of
// an epoch may be short so every token is visited exactly once per epoch.
class BatchStream {
public:
    struct Position {
        std::uint64_t epoch = 0;
        std::uint64_t cursor = 0;
        friend bool operator==(const Position &, const Position &) = default;
    };

    BatchStream(std::shared_ptr<const Dataset> ds, std::size_t batch_size, std::uint64_t seed)
        : ds_(std::move(ds)), batch_size_(batch_size), seed_(seed)
    {
        validate_dataset(*ds_);
        if (batch_size_ < 1 || batch_size_ > ds_->n_tokens()) {
            throw InvalidBatchSize("batch_size " + std::to_string(batch_size_) + " with "
                                   + std::to_string(ds_->n_tokens()) + " tokens");
        }
        for (std::size_t g = 0; g < ds_->groups.size(); ++g) {
            for (std::size_t r = 0; r < ds_->groups[g][0].n_tokens(); ++r) {
                table_.push_back({static_cast<std::uint32_t>(g), r});
            }
        }
        build_epoch();
    }

    const Dataset &dataset() const noexcept { return *ds_; }
    std::size_t batch_size() const noexcept { return batch_size_; }
    std::size_t batches_per_epoch() const noexcept
    {
        return (table_.size() + batch_size_ - 1) / batch_size_;
    }
    Position position() const noexcept { return pos_; }

    void seek(Position p)
    {
        if (p.cursor >= table_.size()) {
            throw ConfigError("batch stream cursor out of range");
        }
        pos_ = p;
        build_epoch();
    }

    AlignedBatch next()
    {
        const std::size_t n = std::min<std::size_t>(batch_size_, table_.size() - pos_.cursor);
        const std::size_t d = ds_->d_model();
        const bool has_meta = ds_->groups[0][0].token_meta.has_value();
        AlignedBatch b;
        b.models = ds_->models;
        b.acts.assign(ds_->models.size(), Matrix<float>(n, d));
        b.token_index.resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            const std::uint64_t t = perm_[pos_.cursor + j];
            const auto [g, r] = table_[t];
            b.token_index[j] = t;
            for (std::size_t i = 0; i < ds_->models.size(); ++i) {
                const auto src = ds_->groups[g][i].data.row(r);
                auto dst = b.acts[i].row(j);
                const auto scale = static_cast<float>(ds_->scales[i]);
                for (std::size_t c = 0; c < d; ++c) {
                    dst[c] = src[c] * scale;
                }
            }
            if (has_meta) {
                b.token_meta.push_back((*ds_->groups[g][0].token_meta)[r]);
            }
        }
        pos_.cursor += n;
        if (pos_.cursor == table_.size()) {
            pos_.cursor = 0;
            pos_.epoch += 1;
            build_epoch();
        }
        return b;
    }

private:
    void build_epoch()
    {
        perm_.resize(table_.size());
        for (std::size_t i = 0; i < perm_.size(); ++i) {
            perm_[i] = i;
        }
        Rng rng = Rng::derived(seed_, pos_.epoch);
        rng.shuffle(perm_);
    }

    struct Slot {
        std::uint32_t group;
        std::size_t row;
    };

    std::shared_ptr<const Dataset> ds_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::vector<Slot> table_;
    std::vector<std::uint64_t> perm_;
    Position pos_;
};

inline BatchStream aligned_batches(const DatasetManifest &manifest, std::size_t batch_size,
                                   std::uint64_t seed)
{
    return BatchStream(std::make_shared<const Dataset>(load_dataset(manifest)), batch_size, seed);
}

} // namespace xcoder

#endif
