#include "seqswap/config.hpp"

#include <fstream>

#include "seqswap/error.hpp"

namespace seqswap {

using nlohmann::json;

namespace {

// Reads the keys of one JSON object and rejects whatever was not read.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  template <class T>
  void get_optional(const char* key, std::optional<T>& out) {
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      seen_.insert(key);
      out.reset();
      return;
    }
    T v{};
    get(key, v);
    out = v;
  }

  const json* sub(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string path(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(path_ + ": unknown key '" + item.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const char* mask_mode_name(MaskMode m) {
  switch (m) {
    case MaskMode::kThreshold: return "threshold";
    case MaskMode::kFixedRetention: return "fixed_retention";
    case MaskMode::kNone: return "none";
    case MaskMode::kExternal: return "external";
  }
  return "?";
}

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "threshold") return MaskMode::kThreshold;
  if (s == "fixed_retention") return MaskMode::kFixedRetention;
  throw ConfigError("unknown mask mode '" + s + "' (expected threshold or fixed_retention)");
}

const char* policy_name(TrainablePolicy p) { return p == TrainablePolicy::kAll ? "all" : "replaced_only"; }

MixerKind kind_from(const std::string& s) {
  try {
    return parse_mixer_kind(s);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

MaskSpec parse_masks(const json& j, const std::string& path) {
  MaskSpec m;
  Section s(j, path);
  std::string mode = mask_mode_name(m.mode);
  s.get("mode", mode);
  m.mode = parse_mask_mode(mode);
  s.get("threshold", m.threshold);
  s.get("retention", m.retention);
  s.finish();
  if (!(m.threshold > 0.0 && m.threshold <= 1.0)) throw ConfigError(path + ".threshold must lie in (0, 1]");
  if (!(m.retention > 0.0 && m.retention <= 1.0)) throw ConfigError(path + ".retention must lie in (0, 1]");
  return m;
}

json masks_json(const MaskSpec& m) {
  return {{"mode", mask_mode_name(m.mode)}, {"threshold", m.threshold}, {"retention", m.retention}};
}

void parse_stage_config(const json& j, const std::string& path, StageConfig& c) {
  Section s(j, path);
  std::string stage = stage_name(c.stage), policy = policy_name(c.policy);
  s.get("stage", stage);
  c.stage = parse_stage(stage);
  s.get("epochs", c.epochs);
  s.get("batch_size", c.batch_size);
  s.get("lr", c.lr);
  s.get("lr_min", c.lr_min);
  s.get("weight_decay", c.weight_decay);
  s.get("policy", policy);
  c.policy = parse_policy(policy);
  s.get("init", c.init);
  if (const json* w = s.sub("weights")) {
    Section ws(*w, s.path("weights"));
    ws.get("cls", c.weights.cls);
    ws.get("sim", c.weights.sim);
    ws.get("mask", c.weights.mask);
    ws.get("avit", c.weights.avit);
    ws.get("halt", c.weights.halt);
    ws.finish();
  }
  if (const json* m = s.sub("masks")) c.masks = parse_masks(*m, s.path("masks"));
  s.finish();
  if (c.batch_size == 0) throw ConfigError(path + ".batch_size must be positive");
  if (c.lr < 0 || c.lr_min < 0) throw ConfigError(path + ": learning rates must be nonnegative");
}

json stage_json(const StageConfig& c) {
  return {{"stage", stage_name(c.stage)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"lr_min", c.lr_min},
          {"weight_decay", c.weight_decay},
          {"policy", policy_name(c.policy)},
          {"init", c.init},
          {"weights",
           {{"cls", c.weights.cls},
            {"sim", c.weights.sim},
            {"mask", c.weights.mask},
            {"avit", c.weights.avit},
            {"halt", c.weights.halt}}},
          {"masks", masks_json(c.masks)}};
}

std::vector<std::string> kind_names(const std::vector<MixerKind>& kinds) {
  std::vector<std::string> out;
  for (auto k : kinds) out.emplace_back(mixer_name(k));
  return out;
}

}  // namespace

json model_config_json(const ModelConfig& c) {
  return {{"layers", c.layers},   {"dim", c.dim},           {"heads", c.heads},
          {"image", c.image},     {"patch", c.patch},       {"channels", c.channels},
          {"classes", c.classes}, {"state_dim", c.state_dim}, {"halting", c.halting},
          {"mixers", kind_names(c.mixers)}};
}

ModelConfig parse_model_config(const json& j) {
  ModelConfig c;
  Section s(j, "model");
  s.get("layers", c.layers);
  s.get("dim", c.dim);
  s.get("heads", c.heads);
  s.get("image", c.image);
  s.get("patch", c.patch);
  s.get("channels", c.channels);
  s.get("classes", c.classes);
  s.get("state_dim", c.state_dim);
  s.get("halting", c.halting);
  std::vector<std::string> mixers;
  s.get("mixers", mixers);
  for (const auto& m : mixers) c.mixers.push_back(kind_from(m));
  s.finish();
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return c;
}

ExperimentConfig::ExperimentConfig() {
  teacher.stage = Stage::kSupervised;
  teacher.epochs = 10;
  teacher.lr = 2e-3;
  teacher.masks = {MaskMode::kFixedRetention, 0.99, 1.0};

  distill.stage = Stage::kStage1;
  distill.epochs = 10;
  distill.lr = 1e-3;
  distill.policy = TrainablePolicy::kReplacedOnly;
  distill.masks = {MaskMode::kThreshold, 0.99, 1.0};

  ablation.train = distill;
  ablation.train.epochs = 50;

  sweep.train = distill;
  sweep.train.masks = {MaskMode::kFixedRetention, 0.99, 1.0};
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  Section s(j, "config");
  if (!j.contains("version")) throw ConfigError("config: missing 'version'");
  s.get("version", c.version);
  if (c.version != kConfigVersion) {
    throw ConfigError("config: unsupported version " + std::to_string(c.version));
  }
  s.get("seed", c.seed);
  if (const json* m = s.sub("model")) c.model = parse_model_config(*m);

  if (const json* d = s.sub("data")) {
    Section ds(*d, "data");
    ds.get("source", c.data.source);
    if (c.data.source != "synthetic" && c.data.source != "idx") {
      throw ConfigError("data.source must be synthetic or idx");
    }
    if (const json* syn = ds.sub("synthetic")) {
      Section ss(*syn, "data.synthetic");
      ss.get("train", c.data.synthetic.train);
      ss.get("val", c.data.synthetic.val);
      ss.get("cell", c.data.synthetic.cell);
      ss.get("noise", c.data.synthetic.noise);
      ss.finish();
    }
    ds.get("train_images", c.data.train_images);
    ds.get("train_labels", c.data.train_labels);
    ds.get("val_images", c.data.val_images);
    ds.get("val_labels", c.data.val_labels);
    ds.get("train_limit", c.data.train_limit);
    ds.get("val_limit", c.data.val_limit);
    ds.finish();
  }
  c.data.synthetic.side = c.model.image;
  c.data.synthetic.classes = c.model.classes;

  if (const json* t = s.sub("teacher")) parse_stage_config(*t, "teacher", c.teacher);
  if (const json* r = s.sub("replace")) {
    Section rs(*r, "replace");
    rs.get("layers", c.replace.layers);
    std::string kind = mixer_name(c.replace.kind);
    rs.get("kind", kind);
    c.replace.kind = kind_from(kind);
    rs.finish();
  }
  if (const json* d = s.sub("distill")) parse_stage_config(*d, "distill", c.distill);
  if (const json* a = s.sub("ablation")) {
    Section as(*a, "ablation");
    std::vector<std::string> kinds = kind_names(c.ablation.kinds);
    as.get("kinds", kinds);
    c.ablation.kinds.clear();
    for (const auto& k : kinds) c.ablation.kinds.push_back(kind_from(k));
    as.get("groups", c.ablation.groups);
    as.get("include_none", c.ablation.include_none);
    as.get("include_full", c.ablation.include_full);
    if (const json* t = as.sub("train")) parse_stage_config(*t, "ablation.train", c.ablation.train);
    as.finish();
  }
  if (const json* w = s.sub("sweep")) {
    Section ws(*w, "sweep");
    ws.get("retentions", c.sweep.retentions);
    ws.get("layers", c.sweep.layers);
    std::string kind = mixer_name(c.sweep.kind);
    ws.get("kind", kind);
    c.sweep.kind = kind_from(kind);
    if (const json* t = ws.sub("train")) parse_stage_config(*t, "sweep.train", c.sweep.train);
    ws.finish();
    for (double r : c.sweep.retentions) {
      if (!(r > 0.0 && r <= 1.0)) throw ConfigError("sweep.retentions must lie in (0, 1]");
    }
  }
  if (const json* a = s.sub("analysis")) {
    Section as(*a, "analysis");
    as.get("checkpoint", c.analysis.checkpoint);
    as.get("samples", c.analysis.samples);
    as.get("random_trials", c.analysis.random_trials);
    if (const json* m = as.sub("masks")) {
      if (!m->is_null()) c.analysis.masks = parse_masks(*m, "analysis.masks");
    }
    as.finish();
    if (c.analysis.samples == 0) throw ConfigError("analysis.samples must be positive");
  }
  if (const json* p = s.sub("profile")) {
    Section ps(*p, "profile");
    ps.get("images", c.profile.images);
    ps.get("checkpoints", c.profile.checkpoints);
    ps.get("baseline", c.profile.baseline);
    ps.get_optional("retention", c.profile.retention);
    ps.get("repeats", c.profile.repeats);
    ps.get("warmup", c.profile.warmup);
    ps.get("batch", c.profile.batch);
    ps.finish();
    if (c.profile.repeats < 3) throw ConfigError("profile.repeats must be at least 3");
    if (c.profile.warmup < 1) throw ConfigError("profile.warmup must be at least 1");
  }
  s.finish();

  for (const auto* layers : {&c.replace.layers, &c.sweep.layers}) {
    for (std::size_t l : *layers) {
      if (l >= c.model.layers) throw ConfigError("replacement layer " + std::to_string(l) + " out of range");
    }
  }
  for (const auto& g : c.ablation.groups) {
    for (std::size_t l : g) {
      if (l >= c.model.layers) throw ConfigError("ablation group layer " + std::to_string(l) + " out of range");
    }
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["version"] = c.version;
  j["seed"] = c.seed;
  j["model"] = model_config_json(c.model);
  j["data"] = {{"source", c.data.source},
               {"synthetic",
                {{"train", c.data.synthetic.train},
                 {"val", c.data.synthetic.val},
                 {"cell", c.data.synthetic.cell},
                 {"noise", c.data.synthetic.noise}}},
               {"train_images", c.data.train_images},
               {"train_labels", c.data.train_labels},
               {"val_images", c.data.val_images},
               {"val_labels", c.data.val_labels},
               {"train_limit", c.data.train_limit},
               {"val_limit", c.data.val_limit}};
  j["teacher"] = stage_json(c.teacher);
  j["replace"] = {{"layers", c.replace.layers}, {"kind", mixer_name(c.replace.kind)}};
  j["distill"] = stage_json(c.distill);
  j["ablation"] = {{"kinds", kind_names(c.ablation.kinds)},
                   {"groups", c.ablation.groups},
                   {"include_none", c.ablation.include_none},
                   {"include_full", c.ablation.include_full},
                   {"train", stage_json(c.ablation.train)}};
  j["sweep"] = {{"retentions", c.sweep.retentions},
                {"layers", c.sweep.layers},
                {"kind", mixer_name(c.sweep.kind)},
                {"train", stage_json(c.sweep.train)}};
  j["analysis"] = {{"checkpoint", c.analysis.checkpoint},
                   {"samples", c.analysis.samples},
                   {"random_trials", c.analysis.random_trials},
                   {"masks", c.analysis.masks ? masks_json(*c.analysis.masks) : json(nullptr)}};
  j["profile"] = {{"images", c.profile.images},
                  {"checkpoints", c.profile.checkpoints},
                  {"baseline", c.profile.baseline},
                  {"retention", c.profile.retention ? json(*c.profile.retention) : json(nullptr)},
                  {"repeats", c.profile.repeats},
                  {"warmup", c.profile.warmup},
                  {"batch", c.profile.batch}};
  return j;
}

TrainConfig train_config(const StageConfig& s, const std::set<std::size_t>& replaced) {
  TrainConfig t;
  t.stage = s.stage;
  t.weights = s.weights;
  t.epochs = s.epochs;
  t.batch_size = s.batch_size;
  t.lr_max = s.lr;
  t.lr_min = s.lr_min;
  t.weight_decay = s.weight_decay;
  t.policy = s.policy;
  t.replaced = replaced;
  t.masks = s.masks;
  return t;
}

}  // namespace seqswap
