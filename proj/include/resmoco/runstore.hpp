#ifndef RESMOCO_RUNSTORE_HPP
#define RESMOCO_RUNSTORE_HPP

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "resmoco/trainer.hpp"

namespace resmoco::store {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* code_version = "resmoco 0.1.0";
inline constexpr int checkpoint_format = 1;

// ---------------------------------------------------------------------------
// Run configuration

/// Everything a pretraining run depends on besides the dataset bytes.
struct RunConfig {
    TrainConfig train;
    data::DatasetKind dataset = data::DatasetKind::synthetic;
    std::string data_dir;
    data::SynthParams synthetic;
    std::int64_t checkpoint_every = 10;  // epochs

    void validate() const {
        train.validate();
        synthetic.validate();
        require(checkpoint_every >= 1, ErrorKind::invalid_argument, "checkpoint_every must be >= 1");
    }

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string_view to_string(nn::BackboneKind k) { return k == nn::BackboneKind::mlp ? "mlp" : "smallconv"; }

inline nn::BackboneKind parse_backbone(const std::string& s) {
    if (s == "mlp") return nn::BackboneKind::mlp;
    if (s == "smallconv") return nn::BackboneKind::smallconv;
    throw Error(ErrorKind::invalid_argument, "unknown backbone '" + s + "'");
}

inline data::DatasetKind parse_dataset_kind(const std::string& s) {
    for (auto k : {data::DatasetKind::cifar10, data::DatasetKind::cifar100, data::DatasetKind::synthetic}) {
        if (data::to_string(k) == s) return k;
    }
    throw Error(ErrorKind::invalid_argument, "unknown dataset '" + s + "'");
}

/// Reads known keys into their targets and rejects anything else, so typos
/// in a config file fail loudly instead of silently keeping a default.
class Fields {
public:
    Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        require(j.is_object(), ErrorKind::invalid_argument, where_ + " must be a JSON object");
    }

    template <typename V>
    Fields& get(const char* key, V& out) {
        seen_.push_back(key);
        if (auto it = j_.find(key); it != j_.end()) {
            try {
                it->get_to(out);
            } catch (const json::exception& e) {
                throw Error(ErrorKind::invalid_argument, where_ + "." + key + ": " + e.what());
            }
        }
        return *this;
    }

    template <typename F>
    Fields& get_with(const char* key, F&& parse) {
        seen_.push_back(key);
        if (auto it = j_.find(key); it != j_.end()) {
            require(it->is_string(), ErrorKind::invalid_argument, where_ + "." + key + " must be a string");
            parse(it->template get<std::string>());
        }
        return *this;
    }

    template <typename F>
    Fields& nested(const char* key, F&& read) {
        seen_.push_back(key);
        if (auto it = j_.find(key); it != j_.end()) read(*it, where_ + "." + key);
        return *this;
    }

    void done() const {
        for (const auto& [k, v] : j_.items()) {
            require(std::find(seen_.begin(), seen_.end(), k) != seen_.end(), ErrorKind::invalid_argument,
                    "unknown key " + where_ + "." + k);
        }
    }

private:
    const json& j_;
    std::string where_;
    std::vector<std::string> seen_;
};

inline json augment_to_json(const data::AugmentParams& p) {
    return {{"min_scale", p.min_scale},         {"crop_size", p.crop_size},   {"crop_p", p.crop_p},
            {"brightness", p.brightness},       {"contrast", p.contrast},     {"saturation", p.saturation},
            {"hue", p.hue},                     {"jitter_apply_p", p.jitter_apply_p},
            {"blur_p", p.blur_p},               {"solarize_p", p.solarize_p}, {"hflip_p", p.hflip_p},
            {"grayscale_p", p.grayscale_p}};
}

inline void augment_from_json(const json& j, const std::string& where, data::AugmentParams& p) {
    Fields(j, where)
        .get("min_scale", p.min_scale)
        .get("crop_size", p.crop_size)
        .get("crop_p", p.crop_p)
        .get("brightness", p.brightness)
        .get("contrast", p.contrast)
        .get("saturation", p.saturation)
        .get("hue", p.hue)
        .get("jitter_apply_p", p.jitter_apply_p)
        .get("blur_p", p.blur_p)
        .get("solarize_p", p.solarize_p)
        .get("hflip_p", p.hflip_p)
        .get("grayscale_p", p.grayscale_p)
        .done();
}

}  // namespace detail

inline json to_json(const TrainConfig& c) {
    const auto& o = c.objective;
    const auto& e = c.encoder;
    return {
        {"lr", c.lr},
        {"eta_lars", c.eta_lars},
        {"weight_decay", c.weight_decay},
        {"momentum", c.momentum},
        {"optimizer", to_string(c.optimizer)},
        {"batch_size", c.batch_size},
        {"epochs", c.epochs},
        {"warmup_epochs", c.warmup_epochs},
        {"beta_base", c.beta_base},
        {"beta_mode", to_string(c.beta_mode)},
        {"seed", c.seed},
        {"intra_toggle_period", c.intra_toggle_period},
        {"objective",
         {{"inter", to_string(o.inter)},
          {"intra", to_string(o.intra)},
          {"tau", o.tau},
          {"tau_s", o.tau_s},
          {"intra_weight", o.intra_weight},
          {"asymmetric_intra", o.asymmetric_intra}}},
        {"encoder",
         {{"backbone", detail::to_string(e.backbone_kind)},
          {"widths", e.backbone_widths},
          {"input_channels", e.input_channels},
          {"input_size", e.input_size},
          {"projector_hidden", e.projector_hidden},
          {"projector_out", e.projector_out},
          {"predictor_hidden", e.predictor_hidden},
          {"use_predictor", e.use_predictor}}},
        {"view1", detail::augment_to_json(c.view1)},
        {"view2", detail::augment_to_json(c.view2)},
    };
}

/// Missing keys keep their defaults; unknown keys are an error.
inline TrainConfig train_config_from_json(const json& j, const std::string& where = "train") {
    TrainConfig c;
    detail::Fields(j, where)
        .get("lr", c.lr)
        .get("eta_lars", c.eta_lars)
        .get("weight_decay", c.weight_decay)
        .get("momentum", c.momentum)
        .get_with("optimizer", [&](const std::string& s) { c.optimizer = parse_optimizer(s); })
        .get("batch_size", c.batch_size)
        .get("epochs", c.epochs)
        .get("warmup_epochs", c.warmup_epochs)
        .get("beta_base", c.beta_base)
        .get_with("beta_mode", [&](const std::string& s) { c.beta_mode = parse_beta_mode(s); })
        .get("seed", c.seed)
        .get("intra_toggle_period", c.intra_toggle_period)
        .nested("objective",
                [&](const json& o, const std::string& w) {
                    detail::Fields(o, w)
                        .get_with("inter", [&](const std::string& s) { c.objective.inter = parse_inter(s); })
                        .get_with("intra", [&](const std::string& s) { c.objective.intra = parse_intra(s); })
                        .get("tau", c.objective.tau)
                        .get("tau_s", c.objective.tau_s)
                        .get("intra_weight", c.objective.intra_weight)
                        .get("asymmetric_intra", c.objective.asymmetric_intra)
                        .done();
                })
        .nested("encoder",
                [&](const json& e, const std::string& w) {
                    detail::Fields(e, w)
                        .get_with("backbone", [&](const std::string& s) { c.encoder.backbone_kind = detail::parse_backbone(s); })
                        .get("widths", c.encoder.backbone_widths)
                        .get("input_channels", c.encoder.input_channels)
                        .get("input_size", c.encoder.input_size)
                        .get("projector_hidden", c.encoder.projector_hidden)
                        .get("projector_out", c.encoder.projector_out)
                        .get("predictor_hidden", c.encoder.predictor_hidden)
                        .get("use_predictor", c.encoder.use_predictor)
                        .done();
                })
        .nested("view1", [&](const json& v, const std::string& w) { detail::augment_from_json(v, w, c.view1); })
        .nested("view2", [&](const json& v, const std::string& w) { detail::augment_from_json(v, w, c.view2); })
        .done();
    return c;
}

inline json to_json(const data::SynthParams& p) {
    return {{"classes", p.classes},       {"per_class", p.per_class}, {"test_per_class", p.test_per_class},
            {"image_size", p.image_size}, {"separation", p.separation}, {"noise", p.noise},
            {"seed", p.seed}};
}

inline json to_json(const RunConfig& r) {
    return {{"train", to_json(r.train)},
            {"dataset", {{"kind", data::to_string(r.dataset)}, {"dir", r.data_dir}, {"synthetic", to_json(r.synthetic)}}},
            {"checkpoint_every", r.checkpoint_every}};
}

inline RunConfig run_config_from_json(const json& j) {
    RunConfig r;
    detail::Fields(j, "config")
        .nested("train", [&](const json& t, const std::string& w) { r.train = train_config_from_json(t, w); })
        .nested("dataset",
                [&](const json& d, const std::string& w) {
                    detail::Fields(d, w)
                        .get_with("kind", [&](const std::string& s) { r.dataset = detail::parse_dataset_kind(s); })
                        .get("dir", r.data_dir)
                        .nested("synthetic",
                                [&](const json& s, const std::string& ws) {
                                    detail::Fields(s, ws)
                                        .get("classes", r.synthetic.classes)
                                        .get("per_class", r.synthetic.per_class)
                                        .get("test_per_class", r.synthetic.test_per_class)
                                        .get("image_size", r.synthetic.image_size)
                                        .get("separation", r.synthetic.separation)
                                        .get("noise", r.synthetic.noise)
                                        .get("seed", r.synthetic.seed)
                                        .done();
                                })
                        .done();
                })
        .get("checkpoint_every", r.checkpoint_every)
        .done();
    return r;
}

inline std::string read_text(const fs::path& path, ErrorKind missing = ErrorKind::io_error) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), missing, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline json parse_json_text(const std::string& text, const std::string& source, ErrorKind kind = ErrorKind::invalid_argument) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(kind, source + ": " + e.what());
    }
}

inline RunConfig load_run_config(const fs::path& path) {
    return run_config_from_json(parse_json_text(read_text(path), path.string()));
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
inline void write_atomic(const fs::path& path, const std::string& bytes) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorKind::io_error, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        require(static_cast<bool>(out), ErrorKind::io_error, "short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// ---------------------------------------------------------------------------
// Manifest

struct RunManifest {
    std::string run_id;
    RunConfig config;
    std::string code_version = store::code_version;
    std::string dataset_fingerprint;

    friend bool operator==(const RunManifest&, const RunManifest&) = default;
};

/// The run id hashes the full config (which includes the seed) and the
/// dataset content, so a rerun of the same experiment gets the same id.
inline RunManifest make_manifest(const RunConfig& cfg, const data::DatasetHandle& ds) {
    RunManifest m;
    m.config = cfg;
    m.dataset_fingerprint = hex64(ds.fingerprint());
    const std::string key = to_json(cfg).dump() + "|" + m.dataset_fingerprint + "|" + m.code_version;
    m.run_id = hex64(fnv1a(key.data(), key.size()));
    return m;
}

inline json to_json(const RunManifest& m) {
    return {{"run_id", m.run_id},
            {"code_version", m.code_version},
            {"dataset_fingerprint", m.dataset_fingerprint},
            {"config", to_json(m.config)}};
}

inline RunManifest manifest_from_json(const json& j) {
    RunManifest m;
    detail::Fields(j, "manifest")
        .get("run_id", m.run_id)
        .get("code_version", m.code_version)
        .get("dataset_fingerprint", m.dataset_fingerprint)
        .nested("config", [&](const json& c, const std::string&) { m.config = run_config_from_json(c); })
        .done();
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: "RESMOCO\0", u64 little-endian header length, header JSON (keys
// sorted), then the blob of little-endian float32 values. Every record in the
// header names a tensor, its shape and its byte offset into the blob.

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

inline void put_f32(std::string& out, float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

inline float get_f32(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
    return std::bit_cast<float>(bits);
}

template <typename T>
std::span<T> span_of(Tensor<T>& t) {
    return t.mutable_values();
}

template <typename T>
std::span<const T> span_of(const Tensor<T>& t) {
    return t.values();
}

template <typename T>
struct NamedSpan {
    std::string name;
    Shape shape;
    std::span<T> values;
};

/// Fixed enumeration order shared by save and load.
template <typename T, typename State>
std::vector<NamedSpan<T>> state_tensors(State& st) {
    std::vector<NamedSpan<T>> out;
    auto add_encoder = [&](auto& enc, const std::string& prefix) {
        for (auto& p : enc.params()) out.push_back({prefix + p.name, p.value.shape(), span_of(p.value)});
        for (auto& b : enc.buffers()) out.push_back({prefix + b.name, b.value.shape(), span_of(b.value)});
    };
    add_encoder(st.student, "student/");
    add_encoder(st.teacher.encoder, "teacher/");
    const auto& params = st.student.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& buf = st.optimizer.buffers[i];
        out.push_back({"optimizer/" + params[i].name, params[i].value.shape(), std::span<T>(buf.data(), buf.size())});
    }
    return out;
}

}  // namespace detail

inline constexpr char checkpoint_magic[8] = {'R', 'E', 'S', 'M', 'O', 'C', 'O', '\0'};

/// Serialized bytes of a training state. Values are stored as float32, so a
/// float state round-trips bitwise.
template <typename T>
std::string encode_checkpoint(const TrainState<T>& st, const RunManifest& manifest) {
    require(st.optimizer.buffers.size() == st.student.params().size(), ErrorKind::invalid_argument,
            "optimizer state does not match the student");
    const auto tensors = detail::state_tensors<const T>(st);
    std::string blob;
    json records = json::array();
    for (const auto& t : tensors) {
        std::vector<std::size_t> dims(t.shape.dims().begin(), t.shape.dims().end());
        records.push_back({{"name", t.name}, {"shape", dims}, {"offset", blob.size()}, {"count", t.values.size()}});
        for (T v : t.values) detail::put_f32(blob, static_cast<float>(v));
    }
    const json header{{"format", checkpoint_format},
                      {"endianness", "little"},
                      {"dtype", "float32"},
                      {"manifest", to_json(manifest)},
                      {"run_id", manifest.run_id},
                      {"step", st.step},
                      {"optimizer_step", st.optimizer.step},
                      {"teacher_last_update", st.teacher.step_of_last_update},
                      {"records", records},
                      {"blob_bytes", blob.size()},
                      {"blob_fnv1a", hex64(fnv1a(blob.data(), blob.size()))}};
    const std::string h = header.dump();
    std::string out(checkpoint_magic, sizeof checkpoint_magic);
    detail::put_u64(out, h.size());
    out += h;
    out += blob;
    return out;
}

template <typename T>
void save_checkpoint(const fs::path& path, const TrainState<T>& st, const RunManifest& manifest) {
    write_atomic(path, encode_checkpoint(st, manifest));
}

struct CheckpointFile {
    json header;
    RunManifest manifest;
    std::vector<unsigned char> blob;
};

inline CheckpointFile parse_checkpoint(const std::string& bytes, const std::string& source) {
    auto corrupt = [&](bool ok, const std::string& what) { require(ok, ErrorKind::checkpoint_corrupt, source + ": " + what); };
    corrupt(bytes.size() >= 16, "file too short for a checkpoint header");
    corrupt(std::memcmp(bytes.data(), checkpoint_magic, 8) == 0, "bad magic");
    std::uint64_t hlen = 0;
    for (int b = 0; b < 8; ++b) hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + b])) << (8 * b);
    corrupt(hlen <= bytes.size() - 16, "header length " + std::to_string(hlen) + " exceeds file size");
    CheckpointFile f;
    f.header = parse_json_text(bytes.substr(16, hlen), source, ErrorKind::checkpoint_corrupt);
    try {
        corrupt(f.header.at("format").get<int>() == checkpoint_format, "unsupported format");
        corrupt(f.header.at("endianness").get<std::string>() == "little", "unsupported endianness tag");
        const auto blob_bytes = f.header.at("blob_bytes").get<std::uint64_t>();
        corrupt(bytes.size() - 16 - hlen == blob_bytes,
                "blob holds " + std::to_string(bytes.size() - 16 - hlen) + " bytes, header says " + std::to_string(blob_bytes));
        f.blob.assign(bytes.begin() + static_cast<std::ptrdiff_t>(16 + hlen), bytes.end());
        corrupt(hex64(fnv1a(f.blob.data(), f.blob.size())) == f.header.at("blob_fnv1a").get<std::string>(), "blob checksum mismatch");
        f.manifest = manifest_from_json(f.header.at("manifest"));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::checkpoint_corrupt, source + ": " + e.what());
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::checkpoint_corrupt) throw;
        throw Error(ErrorKind::checkpoint_corrupt, source + ": " + e.what());
    }
    return f;
}

inline CheckpointFile read_checkpoint(const fs::path& path) {
    return parse_checkpoint(read_text(path, ErrorKind::checkpoint_corrupt), path.string());
}

/// Overwrites `st` with the checkpoint contents; names and shapes must match.
template <typename T>
void restore_state(TrainState<T>& st, const CheckpointFile& f) {
    st.optimizer.ensure(st.student.params());
    const auto tensors = detail::state_tensors<T>(st);
    const auto& records = f.header.at("records");
    require(records.size() == tensors.size(), ErrorKind::checkpoint_corrupt,
            "checkpoint has " + std::to_string(records.size()) + " tensors, model has " + std::to_string(tensors.size()));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& r = records[i];
        const auto& t = tensors[i];
        std::vector<std::size_t> dims(t.shape.dims().begin(), t.shape.dims().end());
        require(r.at("name").get<std::string>() == t.name && r.at("shape").get<std::vector<std::size_t>>() == dims,
                ErrorKind::checkpoint_corrupt, "record " + std::to_string(i) + " does not match tensor " + t.name);
        const auto offset = r.at("offset").get<std::size_t>();
        const auto count = r.at("count").get<std::size_t>();
        require(count == t.values.size() && offset + 4 * count <= f.blob.size(), ErrorKind::checkpoint_corrupt,
                "record " + t.name + " lies outside the blob");
        for (std::size_t k = 0; k < count; ++k) t.values[k] = static_cast<T>(detail::get_f32(f.blob.data() + offset + 4 * k));
    }
    st.step = f.header.at("step").get<std::int64_t>();
    st.optimizer.step = f.header.at("optimizer_step").get<std::int64_t>();
    st.teacher.step_of_last_update = f.header.at("teacher_last_update").get<std::int64_t>();
}

template <typename T>
TrainState<T> load_train_state(const CheckpointFile& f) {
    auto st = init_train_state<T>(f.manifest.config.train);
    try {
        restore_state(st, f);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::checkpoint_corrupt, std::string("checkpoint records: ") + e.what());
    }
    return st;
}

// ---------------------------------------------------------------------------
// Metrics JSONL

inline json to_json(const GapRecord& r, const std::string& run_id) {
    return {{"type", "step"},
            {"run_id", run_id},
            {"step", r.step},
            {"intra_gap", r.intra_gap},
            {"sim_pct", r.sim_pct},
            {"inter_loss", r.inter_loss},
            {"intra_loss", r.intra_loss},
            {"total_loss", r.total_loss},
            {"beta", r.beta},
            {"lr", r.lr},
            {"intra_active", r.intra_active}};
}

inline json to_json(const EpochSummary& e, const std::string& run_id) {
    return {{"type", "epoch"},
            {"run_id", run_id},
            {"epoch", e.epoch},
            {"last_step", e.last_step},
            {"mean_total_loss", e.mean_total_loss},
            {"mean_intra_gap", e.mean_intra_gap},
            {"mean_sim_pct", e.mean_sim_pct}};
}

struct MetricsLog {
    std::string run_id;
    std::vector<GapRecord> steps;
    std::vector<EpochSummary> epochs;
};

/// Parses a metrics stream. Any malformed line is reported with its 1-based
/// line number; step records must be strictly increasing.
inline MetricsLog parse_metrics(std::istream& in, const std::string& source) {
    MetricsLog log;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(lineno);
        try {
            const json j = json::parse(line);
            const auto run_id = j.at("run_id").get<std::string>();
            require(log.run_id.empty() || run_id == log.run_id, ErrorKind::metrics_malformed, where + ": run id changes mid-file");
            log.run_id = run_id;
            const auto type = j.at("type").get<std::string>();
            if (type == "step") {
                GapRecord r;
                j.at("step").get_to(r.step);
                j.at("intra_gap").get_to(r.intra_gap);
                j.at("sim_pct").get_to(r.sim_pct);
                j.at("inter_loss").get_to(r.inter_loss);
                j.at("intra_loss").get_to(r.intra_loss);
                j.at("total_loss").get_to(r.total_loss);
                j.at("beta").get_to(r.beta);
                j.at("lr").get_to(r.lr);
                j.at("intra_active").get_to(r.intra_active);
                require(log.steps.empty() || r.step > log.steps.back().step, ErrorKind::metrics_malformed,
                        where + ": step " + std::to_string(r.step) + " does not increase");
                log.steps.push_back(r);
            } else if (type == "epoch") {
                EpochSummary e;
                j.at("epoch").get_to(e.epoch);
                j.at("last_step").get_to(e.last_step);
                j.at("mean_total_loss").get_to(e.mean_total_loss);
                j.at("mean_intra_gap").get_to(e.mean_intra_gap);
                j.at("mean_sim_pct").get_to(e.mean_sim_pct);
                log.epochs.push_back(e);
            } else {
                throw Error(ErrorKind::metrics_malformed, where + ": unknown record type '" + type + "'");
            }
        } catch (const json::exception& e) {
            throw Error(ErrorKind::metrics_malformed, where + ": " + e.what());
        }
    }
    return log;
}

inline MetricsLog read_metrics(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::metrics_malformed, "cannot open metrics file " + path.string());
    return parse_metrics(in, path.string());
}

/// Append-only writer, one flushed line per record. Keeps its own per-epoch
/// accumulators so summaries stay exact across a resume.
class MetricsWriter {
public:
    MetricsWriter(const fs::path& path, std::string run_id, const MetricsLog* existing = nullptr)
        : out_(path, std::ios::binary | std::ios::app), run_id_(std::move(run_id)) {
        require(static_cast<bool>(out_), ErrorKind::io_error, "cannot open metrics file " + path.string());
        if (existing != nullptr) pending_ = existing->steps;
    }

    void step(const GapRecord& r) {
        write(to_json(r, run_id_));
        pending_.push_back(r);
    }

    /// Summarises records with step in (previous boundary, last_step].
    void epoch_end(std::int64_t epoch, std::int64_t last_step, std::int64_t steps_per_epoch) {
        EpochSummary e{epoch, last_step};
        const std::int64_t first = last_step - steps_per_epoch + 1;
        std::size_t n = 0;
        for (const auto& r : pending_) {
            if (r.step < first || r.step > last_step) continue;
            e.mean_total_loss += r.total_loss;
            e.mean_intra_gap += r.intra_gap;
            e.mean_sim_pct += r.sim_pct;
            ++n;
        }
        if (n > 0) {
            e.mean_total_loss /= static_cast<double>(n);
            e.mean_intra_gap /= static_cast<double>(n);
            e.mean_sim_pct /= static_cast<double>(n);
        }
        write(to_json(e, run_id_));
        std::erase_if(pending_, [&](const GapRecord& r) { return r.step <= last_step; });
    }

private:
    void write(const json& j) {
        out_ << j.dump() << '\n';
        out_.flush();
        require(static_cast<bool>(out_), ErrorKind::io_error, "metrics write failed");
    }

    std::ofstream out_;
    std::string run_id_;
    std::vector<GapRecord> pending_;
};

/// Rewrites the file keeping only records from steps before `step`.
inline MetricsLog truncate_metrics(const fs::path& path, std::int64_t step) {
    MetricsLog log = fs::exists(path) ? read_metrics(path) : MetricsLog{};
    std::erase_if(log.steps, [&](const GapRecord& r) { return r.step >= step; });
    std::erase_if(log.epochs, [&](const EpochSummary& e) { return e.last_step >= step; });
    std::string text;
    std::size_t si = 0;
    for (const auto& e : log.epochs) {
        for (; si < log.steps.size() && log.steps[si].step <= e.last_step; ++si) text += to_json(log.steps[si], log.run_id).dump() + "\n";
        text += to_json(e, log.run_id).dump() + "\n";
    }
    for (; si < log.steps.size(); ++si) text += to_json(log.steps[si], log.run_id).dump() + "\n";
    write_atomic(path, text);
    return log;
}

// ---------------------------------------------------------------------------
// Gap report

struct GapSummary {
    std::size_t records = 0;
    std::size_t tail_count = 0;
    std::int64_t tail_first_step = 0;
    double tail_mean_intra_gap = 0.0;
    double tail_mean_sim_pct = 0.0;
};

/// Means over the final quarter of the records (at least one record).
inline GapSummary summarize_gap(const std::vector<GapRecord>& steps) {
    require(!steps.empty(), ErrorKind::metrics_malformed, "no step records");
    GapSummary s;
    s.records = steps.size();
    s.tail_count = steps.size() - (steps.size() * 3) / 4;
    const std::size_t first = steps.size() - s.tail_count;
    s.tail_first_step = steps[first].step;
    for (std::size_t i = first; i < steps.size(); ++i) {
        s.tail_mean_intra_gap += steps[i].intra_gap;
        s.tail_mean_sim_pct += steps[i].sim_pct;
    }
    s.tail_mean_intra_gap /= static_cast<double>(s.tail_count);
    s.tail_mean_sim_pct /= static_cast<double>(s.tail_count);
    return s;
}

inline json to_json(const GapSummary& s, const std::string& run_id) {
    return {{"run_id", run_id},
            {"records", s.records},
            {"tail_fraction", 0.25},
            {"tail_count", s.tail_count},
            {"tail_first_step", s.tail_first_step},
            {"tail_mean_intra_gap", s.tail_mean_intra_gap},
            {"tail_mean_sim_pct", s.tail_mean_sim_pct}};
}

/// CSV rows for every step record, preceded by a run-id comment and followed
/// by the summary as comment lines.
inline std::string gap_csv(const MetricsLog& log) {
    const auto summary = summarize_gap(log.steps);
    std::string out = "# run_id=" + log.run_id + "\n";
    out += "step,intra_gap,sim_pct,inter_loss,intra_loss,beta,lr\n";
    char buf[256];
    for (const auto& r : log.steps) {
        std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", static_cast<long long>(r.step), r.intra_gap,
                      r.sim_pct, r.inter_loss, r.intra_loss, r.beta, r.lr);
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "# summary tail_count=%zu tail_first_step=%lld tail_mean_intra_gap=%.17g tail_mean_sim_pct=%.17g\n",
                  summary.tail_count, static_cast<long long>(summary.tail_first_step), summary.tail_mean_intra_gap,
                  summary.tail_mean_sim_pct);
    out += buf;
    return out;
}

// ---------------------------------------------------------------------------
// Run directories

struct RunOptions {
    bool force = false;
    bool resume = false;
    // Stop (with a checkpoint) before this step; used to exercise resume.
    std::optional<std::int64_t> stop_step;
};

struct RunPaths {
    fs::path dir;
    [[nodiscard]] fs::path manifest() const { return dir / "manifest.json"; }
    [[nodiscard]] fs::path metrics() const { return dir / "metrics.jsonl"; }
    [[nodiscard]] fs::path checkpoint() const { return dir / "checkpoint.bin"; }
};

inline data::DatasetHandle load_run_dataset(const RunConfig& cfg) {
    switch (cfg.dataset) {
        case data::DatasetKind::cifar10:
        case data::DatasetKind::cifar100: {
            require(!cfg.data_dir.empty() && fs::is_directory(cfg.data_dir), ErrorKind::dataset_not_found,
                    "dataset directory '" + cfg.data_dir + "' does not exist");
            return cfg.dataset == data::DatasetKind::cifar10 ? data::load_cifar10(cfg.data_dir) : data::load_cifar100(cfg.data_dir);
        }
        case data::DatasetKind::synthetic: return data::synth_blobs(cfg.synthetic);
    }
    throw Error(ErrorKind::invalid_argument, "unknown dataset kind");
}

struct RunOutcome {
    RunManifest manifest;
    TrainState<float> state;
    bool finished = false;
};

/// Pretraining with persistence: manifest, metrics JSONL and a checkpoint
/// every `checkpoint_every` epochs, at a requested stop and at the end.
inline RunOutcome run_pretrain(const RunConfig& cfg, const data::DatasetHandle& ds, const fs::path& out, const RunOptions& opt) {
    cfg.validate();
    const RunPaths paths{out};
    const auto manifest = make_manifest(cfg, ds);
    const bool populated = fs::exists(out) && !fs::is_empty(out);
    RunOutcome result{manifest, {}, false};
    MetricsLog existing;
    if (opt.resume && fs::exists(paths.checkpoint())) {
        const auto ckpt = read_checkpoint(paths.checkpoint());
        require(ckpt.manifest.run_id == manifest.run_id, ErrorKind::invalid_argument,
                "checkpoint belongs to run " + ckpt.manifest.run_id + ", this config is run " + manifest.run_id);
        result.state = load_train_state<float>(ckpt);
        existing = truncate_metrics(paths.metrics(), result.state.step);
    } else {
        require(!populated || opt.force, ErrorKind::io_error,
                "output directory " + out.string() + " is not empty; pass --force to overwrite or --resume to continue");
        if (populated) {
            for (const auto& entry : fs::directory_iterator(out)) fs::remove_all(entry.path());
        }
        fs::create_directories(out);
        write_atomic(paths.manifest(), to_json(manifest).dump(2) + "\n");
        write_atomic(paths.metrics(), "");
        result.state = init_train_state<float>(cfg.train);
    }

    const auto sched = make_schedule(cfg.train, ds.train.size());
    MetricsWriter writer(paths.metrics(), manifest.run_id, &existing);
    PretrainHooks<float> hooks;
    hooks.on_step = [&](const GapRecord& r) { writer.step(r); };
    hooks.on_epoch = [&](const EpochSummary& e, const TrainState<float>& st) {
        writer.epoch_end(e.epoch, e.last_step, sched.steps_per_epoch);
        if ((e.epoch + 1) % cfg.checkpoint_every == 0) save_checkpoint(paths.checkpoint(), st, manifest);
    };
    run_pretraining(result.state, cfg.train, ds, hooks, opt.stop_step);
    save_checkpoint(paths.checkpoint(), result.state, manifest);
    result.finished = result.state.step >= sched.total_steps;
    return result;
}

}  // namespace resmoco::store

#endif  // RESMOCO_RUNSTORE_HPP
