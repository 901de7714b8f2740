#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "featmine/data.hpp"
#include "featmine/fm_strategy.hpp"
#include "featmine/trainer.hpp"

namespace featmine {

using json = nlohmann::ordered_json;

/// Environment variable that, when set, replaces data.root.
inline constexpr const char* kDataRootEnv = "FEATMINE_DATA_ROOT";

struct DataConfig {
  std::string source = "synthetic";  // synthetic | cifar
  std::string root;                   // directory with the CIFAR binary files
  int version = 10;                   // 10 | 100
  SyntheticSpec synthetic{10, 100, 32, 0, 40.0};
  int synthetic_test_per_class = 50;
  std::optional<NoiseSpec> noise;
  std::optional<int> subset_per_class;
  double mixup_alpha = 0.0;
  bool augment = true;
  bool operator==(const DataConfig&) const = default;
};

struct AblationVariant {
  std::string name;
  FMConfig fm;
  bool operator==(const AblationVariant&) const = default;
};

struct ProbeConfig {
  std::vector<std::string> checkpoints;  // compared side by side
  std::vector<std::string> stages{"stage1", "stage2", "stage3"};
  double threshold = 0.5;
  int samples = 64;
  int cam_images = 4;
  std::string fixed_mask;  // empty: no fixed-mask training run
  bool operator==(const ProbeConfig&) const = default;
};

struct OverheadSettings {
  int batch_size = 128;
  int iters = 20;
  int warmup = 10;
  bool operator==(const OverheadSettings&) const = default;
};

/// Everything a subcommand needs; one file fully determines a run.
struct RunConfig {
  ModelSpec model;
  FMConfig fm;
  DataConfig data;
  Schedule schedule = Schedule::desk();
  SeedBundle seeds;
  std::vector<std::uint64_t> repeats{0};  // seed offsets; results reported as mean and std
  std::string output_dir = "runs/default";
  std::string checkpoint;                 // eval input
  bool keep_fm_heads = false;             // store auxiliary heads in checkpoints
  std::string derived_output;             // corrupt/subset output file
  std::vector<AblationVariant> ablation;
  ProbeConfig probe;
  OverheadSettings overhead;

  int dataset_classes() const {
    return data.source == "cifar" ? data.version : data.synthetic.num_classes;
  }

  void validate() const {
    model.validate();
    fm.validate();
    schedule.validate();
    for (const auto& v : ablation) {
      if (v.name.empty()) throw ConfigError("ablation: every variant needs a name");
      v.fm.validate();
    }
    if (data.source != "synthetic" && data.source != "cifar") {
      throw ConfigError("data.source: expected 'synthetic' or 'cifar', got '" + data.source + "'");
    }
    if (data.source == "cifar") {
      cifar::check_version(data.version);
      if (data.root.empty()) throw ConfigError("data.root: required when data.source is 'cifar'");
      if (model.input_size != 32) throw ConfigError("model.input_size: CIFAR images are 32x32");
    } else if (data.synthetic.side != model.input_size) {
      throw ConfigError("data.synthetic.side must equal model.input_size");
    }
    if (model.num_classes != dataset_classes()) {
      throw ConfigError(detail::concat("model.num_classes (", model.num_classes,
                                       ") does not match the dataset (", dataset_classes(), ")"));
    }
    if (data.noise && !(data.noise->epsilon >= 0.0 && data.noise->epsilon < 1.0)) {
      throw ConfigError("data.noise.epsilon: must be in [0, 1)");
    }
    if (data.subset_per_class && *data.subset_per_class < 1) {
      throw ConfigError("data.subset_per_class: must be >= 1");
    }
    if (data.mixup_alpha < 0.0) throw ConfigError("data.mixup_alpha: must be >= 0");
    if (repeats.empty()) throw ConfigError("repeats: at least one seed offset required");
    if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
    if (probe.samples < 1) throw ConfigError("probe.samples: must be >= 1");
    if (probe.cam_images < 0) throw ConfigError("probe.cam_images: must be >= 0");
    if (overhead.iters < 1 || overhead.warmup < 0 || overhead.batch_size < 1) {
      throw ConfigError("overhead: iters >= 1, warmup >= 0, batch_size >= 1 required");
    }
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

// Reads fields of one JSON object, reporting the full path on errors and
// rejecting keys nobody asked for.
class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.push_back(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where(key) + "wrong type (" + std::string(j_.at(key).type_name()) + ")");
    }
  }

  template <typename Parse, typename T>
  void parse(const std::string& key, T& out, Parse&& fn) {
    std::string text;
    get(key, text);
    if (!j_.contains(key)) return;
    try {
      out = fn(text);
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + e.what());
    }
  }

  const json* child(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    seen_.push_back(key);
    return &j_.at(key);
  }

  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
        throw ConfigError(where() + "unknown field '" + key + "'");
      }
    }
  }

 private:
  std::string where(const std::string& key = {}) const {
    const std::string p = key.empty() ? path_ : path(key);
    return p.empty() ? std::string() : p + ": ";
  }

  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline FMConfig fm_from_json(const json& j, const std::string& path) {
  FMConfig fm;
  FieldReader r(j, path);
  r.get("enabled", fm.enabled);
  r.get("sites", fm.sites);
  r.parse("variant", fm.variant, parse_mask_kind);
  r.parse("pairing", fm.pairing, parse_pairing);
  r.get("per_sample", fm.per_sample);
  r.finish();
  return fm;
}

inline json fm_to_json(const FMConfig& fm) {
  return json{{"enabled", fm.enabled},
              {"sites", fm.sites},
              {"variant", std::string(to_string(fm.variant))},
              {"pairing", std::string(to_string(fm.pairing))},
              {"per_sample", fm.per_sample}};
}

}  // namespace detail

inline ModelSpec model_spec_from_json(const json& j, const std::string& path = "model") {
  ModelSpec m;
  detail::FieldReader r(j, path);
  r.parse("family", m.family, parse_family);
  r.get("depth", m.depth);
  r.get("stage_widths", m.stage_widths);
  r.get("num_classes", m.num_classes);
  r.get("input_size", m.input_size);
  r.finish();
  return m;
}

inline json model_spec_to_json(const ModelSpec& m) {
  return json{{"family", std::string(to_string(m.family))},
              {"depth", m.depth},
              {"stage_widths", m.stage_widths},
              {"num_classes", m.num_classes},
              {"input_size", m.input_size}};
}

inline FMConfig fm_config_from_json(const json& j) { return detail::fm_from_json(j, "fm"); }
inline json fm_config_to_json(const FMConfig& fm) { return detail::fm_to_json(fm); }

inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  detail::FieldReader top(j, "");
  if (auto* m = top.child("model")) c.model = model_spec_from_json(*m);
  if (auto* f = top.child("fm")) c.fm = detail::fm_from_json(*f, "fm");

  if (auto* d = top.child("data")) {
    detail::FieldReader r(*d, "data");
    r.get("source", c.data.source);
    r.get("root", c.data.root);
    r.get("version", c.data.version);
    if (auto* s = r.child("synthetic")) {
      detail::FieldReader sr(*s, "data.synthetic");
      sr.get("num_classes", c.data.synthetic.num_classes);
      sr.get("per_class", c.data.synthetic.per_class);
      sr.get("test_per_class", c.data.synthetic_test_per_class);
      sr.get("side", c.data.synthetic.side);
      sr.get("noise", c.data.synthetic.noise);
      sr.get("seed", c.data.synthetic.seed);
      sr.finish();
    }
    if (auto* n = r.child("noise")) {
      if (!n->is_null()) {
        NoiseSpec ns;
        detail::FieldReader nr(*n, "data.noise");
        nr.parse("kind", ns.kind, parse_noise_kind);
        nr.get("epsilon", ns.epsilon);
        nr.finish();
        c.data.noise = ns;
      }
    }
    if (auto* s = r.child("subset_per_class")) {
      if (!s->is_null()) {
        if (!s->is_number_integer()) throw ConfigError("data.subset_per_class: expected an integer");
        c.data.subset_per_class = s->get<int>();
      }
    }
    r.get("mixup_alpha", c.data.mixup_alpha);
    r.get("augment", c.data.augment);
    r.finish();
  }

  if (auto* s = top.child("schedule")) {
    detail::FieldReader r(*s, "schedule");
    r.get("epochs", c.schedule.epochs);
    r.get("batch_size", c.schedule.batch_size);
    r.get("base_lr", c.schedule.base_lr);
    r.get("milestones", c.schedule.milestones);
    r.get("decay", c.schedule.decay);
    r.get("momentum", c.schedule.momentum);
    r.get("weight_decay", c.schedule.weight_decay);
    r.get("max_iters_per_epoch", c.schedule.max_iters_per_epoch);
    r.finish();
  }

  if (auto* s = top.child("seeds")) {
    detail::FieldReader r(*s, "seeds");
    r.get("init", c.seeds.init);
    r.get("shuffle", c.seeds.shuffle);
    r.get("augment", c.seeds.augment);
    r.get("mask", c.seeds.mask);
    r.get("noise", c.seeds.noise);
    r.get("subset", c.seeds.subset);
    r.get("mixup", c.seeds.mixup);
    r.get("probe", c.seeds.probe);
    r.finish();
  }
  top.get("repeats", c.repeats);
  top.get("output_dir", c.output_dir);
  top.get("checkpoint", c.checkpoint);
  top.get("keep_fm_heads", c.keep_fm_heads);
  top.get("derived_output", c.derived_output);

  if (auto* a = top.child("ablation")) {
    if (!a->is_array()) throw ConfigError("ablation: expected a list of variants");
    for (std::size_t i = 0; i < a->size(); ++i) {
      const std::string path = "ablation[" + std::to_string(i) + "]";
      detail::FieldReader r((*a)[i], path);
      AblationVariant v;
      r.get("name", v.name);
      if (auto* f = r.child("fm")) v.fm = detail::fm_from_json(*f, path + ".fm");
      r.finish();
      c.ablation.push_back(std::move(v));
    }
  }

  if (auto* p = top.child("probe")) {
    detail::FieldReader r(*p, "probe");
    r.get("checkpoints", c.probe.checkpoints);
    r.get("stages", c.probe.stages);
    r.get("threshold", c.probe.threshold);
    r.get("samples", c.probe.samples);
    r.get("cam_images", c.probe.cam_images);
    r.get("fixed_mask", c.probe.fixed_mask);
    r.finish();
  }

  if (auto* o = top.child("overhead")) {
    detail::FieldReader r(*o, "overhead");
    r.get("batch_size", c.overhead.batch_size);
    r.get("iters", c.overhead.iters);
    r.get("warmup", c.overhead.warmup);
    r.finish();
  }
  top.finish();
  return c;
}

inline json config_to_json(const RunConfig& c) {
  json data{{"source", c.data.source},
            {"root", c.data.root},
            {"version", c.data.version},
            {"synthetic",
             {{"num_classes", c.data.synthetic.num_classes},
              {"per_class", c.data.synthetic.per_class},
              {"test_per_class", c.data.synthetic_test_per_class},
              {"side", c.data.synthetic.side},
              {"noise", c.data.synthetic.noise},
              {"seed", c.data.synthetic.seed}}},
            {"noise", nullptr},
            {"subset_per_class", nullptr},
            {"mixup_alpha", c.data.mixup_alpha},
            {"augment", c.data.augment}};
  if (c.data.noise) {
    data["noise"] = {{"kind", std::string(to_string(c.data.noise->kind))},
                     {"epsilon", c.data.noise->epsilon}};
  }
  if (c.data.subset_per_class) data["subset_per_class"] = *c.data.subset_per_class;

  json ablation = json::array();
  for (const auto& v : c.ablation) ablation.push_back({{"name", v.name}, {"fm", detail::fm_to_json(v.fm)}});

  return json{
      {"model", model_spec_to_json(c.model)},
      {"fm", detail::fm_to_json(c.fm)},
      {"data", data},
      {"schedule",
       {{"epochs", c.schedule.epochs},
        {"batch_size", c.schedule.batch_size},
        {"base_lr", c.schedule.base_lr},
        {"milestones", c.schedule.milestones},
        {"decay", c.schedule.decay},
        {"momentum", c.schedule.momentum},
        {"weight_decay", c.schedule.weight_decay},
        {"max_iters_per_epoch", c.schedule.max_iters_per_epoch}}},
      {"seeds",
       {{"init", c.seeds.init},
        {"shuffle", c.seeds.shuffle},
        {"augment", c.seeds.augment},
        {"mask", c.seeds.mask},
        {"noise", c.seeds.noise},
        {"subset", c.seeds.subset},
        {"mixup", c.seeds.mixup},
        {"probe", c.seeds.probe}}},
      {"repeats", c.repeats},
      {"output_dir", c.output_dir},
      {"checkpoint", c.checkpoint},
      {"keep_fm_heads", c.keep_fm_heads},
      {"derived_output", c.derived_output},
      {"ablation", ablation},
      {"probe",
       {{"checkpoints", c.probe.checkpoints},
        {"stages", c.probe.stages},
        {"threshold", c.probe.threshold},
        {"samples", c.probe.samples},
        {"cam_images", c.probe.cam_images},
        {"fixed_mask", c.probe.fixed_mask}}},
      {"overhead",
       {{"batch_size", c.overhead.batch_size},
        {"iters", c.overhead.iters},
        {"warmup", c.overhead.warmup}}}};
}

inline std::string serialize_config(const RunConfig& c) { return config_to_json(c).dump(2) + "\n"; }

inline RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

/// Reads, applies the data-root environment override, and validates.
inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c = parse_config(ss.str());
  if (const char* root = std::getenv(kDataRootEnv); root && *root) c.data.root = root;
  c.validate();
  return c;
}

}  // namespace featmine
