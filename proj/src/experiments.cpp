#include "seqswap/experiments.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "seqswap/analysis.hpp"
#include "seqswap/checkpoint.hpp"
#include "seqswap/error.hpp"

namespace seqswap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string join_layers(const std::set<std::size_t>& layers, const char* sep) {
  std::string s;
  for (std::size_t l : layers) s += (s.empty() ? "" : sep) + std::to_string(l);
  return s;
}

std::function<void(const EpochMetrics&)> echo(const Workspace& ws, const std::string& run) {
  return [&ws, run](const EpochMetrics& m) {
    ws.say(run + " epoch " + std::to_string(m.epoch) + " loss " + fmt(m.loss.total) + " val_top1 " +
           fmt(m.val_top1));
  };
}

void save_log(const Workspace& ws, const std::string& name, const TrainResult& r) {
  write_atomic(ws.log(name).string(), log_lines(r));
}

// Masks a model's own halting heads produce at evaluation time.
std::optional<MaskSpec> own_eval_masks(const Model& m, const MaskSpec& spec) {
  if (m.halting.empty()) return std::nullopt;
  return spec;
}

Model replacement(const Model& teacher, const std::set<std::size_t>& layers, MixerKind kind, std::uint64_t seed,
                  std::uint64_t salt) {
  Rng rng(mix_seed(mix_seed(seed, stream::kReplace), salt));
  return replace_layers(teacher, layers, kind, rng);
}

std::size_t cfg_tokens(std::size_t image, std::size_t patch) { return (image / patch) * (image / patch) + 1; }

}  // namespace

std::string log_lines(const TrainResult& r) {
  std::string out;
  for (const auto& m : r.log) out += metrics_json(m) + "\n";
  return out;
}

Splits load_splits(const ExperimentConfig& config) {
  Splits s;
  if (config.data.source == "synthetic") {
    SyntheticTask task = make_synthetic(config.data.synthetic, mix_seed(config.seed, stream::kData));
    s.train = std::move(task.train);
    s.val = std::move(task.val);
  } else {
    s.train = load_idx(config.data.train_images, config.data.train_labels, config.model.classes);
    s.val = load_idx(config.data.val_images, config.data.val_labels, config.model.classes);
  }
  for (const Dataset* d : {&s.train, &s.val}) {
    if (d->side != config.model.image || d->channels != config.model.channels) {
      throw ConfigError("dataset images are " + std::to_string(d->side) + "x" + std::to_string(d->side) +
                        " with " + std::to_string(d->channels) + " channel(s); the model expects " +
                        std::to_string(config.model.image));
    }
  }
  if (config.data.train_limit) s.train = s.train.subset(config.data.train_limit);
  if (config.data.val_limit) s.val = s.val.subset(config.data.val_limit);
  return s;
}

Model require_checkpoint(const Workspace& ws, const std::string& name) {
  const fs::path p = ws.checkpoint(name);
  if (!fs::exists(p)) throw DependencyError("missing artifact " + p.string() + " (checkpoint '" + name + "')");
  return load_checkpoint(p.string());
}

TrainResult train_teacher(const Workspace& ws) {
  const ExperimentConfig& c = ws.config;
  if (c.teacher.stage != Stage::kSupervised) throw ConfigError("teacher.stage must be supervised");
  const Splits data = load_splits(c);
  Rng rng(mix_seed(c.seed, stream::kInit));
  Model teacher = init_model(c.model, rng);
  const TrainResult r = train(teacher, nullptr, data.train, data.val, train_config(c.teacher, {}), c.seed,
                              echo(ws, "teacher"));
  save_log(ws, "teacher", r);
  save_checkpoint(teacher, ws.checkpoint("teacher").string());
  return r;
}

Model build_student(const Workspace& ws) {
  const ExperimentConfig& c = ws.config;
  const Model teacher = require_checkpoint(ws, "teacher");
  Model student = replacement(teacher, c.replace.layers, c.replace.kind, c.seed, 0);
  save_checkpoint(student, ws.checkpoint("student_init").string());
  json info = {{"replaced", c.replace.layers},
               {"kind", mixer_name(c.replace.kind)},
               {"teacher_parameters", parameter_count(teacher)},
               {"student_parameters", parameter_count(student)}};
  write_atomic(ws.report("replace.json").string(), info.dump(2) + "\n");
  ws.say("student_init: replaced layers [" + join_layers(c.replace.layers, ",") + "] with " +
         mixer_name(c.replace.kind));
  return student;
}

TrainResult distill_student(const Workspace& ws) {
  const ExperimentConfig& c = ws.config;
  const StageConfig& s = c.distill;
  if (s.stage == Stage::kSupervised) throw ConfigError("distill.stage must be dense, stage1 or stage2");
  const Model teacher = require_checkpoint(ws, "teacher");
  const std::string init = !s.init.empty() ? s.init : s.stage == Stage::kStage2 ? "student_stage1" : "student_init";
  Model student = require_checkpoint(ws, init);
  const Splits data = load_splits(c);
  const std::string run = std::string("distill_") + stage_name(s.stage);
  const TrainResult r =
      train(student, &teacher, data.train, data.val, train_config(s, c.replace.layers), c.seed, echo(ws, run));
  save_log(ws, run, r);
  save_checkpoint(student, ws.checkpoint(std::string("student_") + stage_name(s.stage)).string());
  return r;
}

std::vector<AblationRow> ablate_groups(const Workspace& ws) {
  const ExperimentConfig& c = ws.config;
  const AblationConfig& a = c.ablation;
  if (a.kinds.empty()) throw ConfigError("ablation.kinds is empty");
  const Model teacher = require_checkpoint(ws, "teacher");
  const Splits data = load_splits(c);

  std::vector<std::pair<std::string, std::set<std::size_t>>> groups;
  if (a.include_none) groups.push_back({"none", {}});
  if (a.groups.empty()) {
    for (std::size_t l = 0; l < c.model.layers; ++l) groups.push_back({std::to_string(l), {l}});
  } else {
    for (const auto& g : a.groups) groups.push_back({join_layers(g, "-"), g});
  }
  if (a.include_full) {
    std::set<std::size_t> all;
    for (std::size_t l = 0; l < c.model.layers; ++l) all.insert(l);
    groups.push_back({"full", all});
  }

  std::vector<AblationRow> rows;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    AblationRow row{groups[g].first, groups[g].second, {}, {}, {}};
    std::optional<TrainResult> none_result;
    for (std::size_t k = 0; k < a.kinds.size(); ++k) {
      const std::string run = "ablate_" + std::string(mixer_name(a.kinds[k])) + "_" + row.label;
      TrainResult r;
      if (row.layers.empty()) {
        // Nothing is replaced: the row is the teacher under the same evaluation.
        if (!none_result) {
          Model copy = teacher.clone();
          TrainConfig tc = train_config(a.train, {});
          tc.epochs = 0;
          none_result = train(copy, &teacher, data.train, data.val, tc, c.seed);
        }
        r = *none_result;
      } else {
        Model student = replacement(teacher, row.layers, a.kinds[k], c.seed, 1 + g * 8 + k);
        r = train(student, &teacher, data.train, data.val, train_config(a.train, row.layers), c.seed, echo(ws, run));
      }
      save_log(ws, run, r);
      row.top1.push_back(r.log.back().val_top1);
      row.sim_start.push_back(r.log.front().loss.sim);
      row.sim_end.push_back(r.log.back().loss.sim);
    }
    rows.push_back(std::move(row));
  }

  std::string csv = "replaced";
  for (auto k : a.kinds) csv += std::string(",") + mixer_name(k) + "_top1";
  for (auto k : a.kinds) csv += std::string(",") + mixer_name(k) + "_sim_final";
  csv += "\n";
  for (const auto& row : rows) {
    csv += row.label;
    for (double v : row.top1) csv += "," + fmt(v);
    for (double v : row.sim_end) csv += "," + fmt(v, 6);
    csv += "\n";
  }
  write_atomic(ws.report("ablate_groups.csv").string(), csv);
  return rows;
}

std::vector<SweepRow> sweep_retention(const Workspace& ws) {
  const ExperimentConfig& c = ws.config;
  const Model teacher = require_checkpoint(ws, "teacher");
  if (teacher.halting.empty()) {
    throw ContractError("sweep-retention needs a teacher with halting heads (model.halting)");
  }
  const Splits data = load_splits(c);
  std::vector<SweepRow> rows;
  std::string csv = "retention,teacher_top1,student_top1,gap\n";
  for (std::size_t i = 0; i < c.sweep.retentions.size(); ++i) {
    const double rho = c.sweep.retentions[i];
    StageConfig sc = c.sweep.train;
    sc.masks = {MaskMode::kFixedRetention, sc.masks.threshold, rho};
    SweepRow row;
    row.retention = rho;
    row.teacher_top1 = evaluate(teacher, data.val, sc.masks).top1;
    Model student = replacement(teacher, c.sweep.layers, c.sweep.kind, c.seed, 100 + i);
    const std::string run = "sweep_" + fmt(rho, 2);
    const TrainResult r =
        train(student, &teacher, data.train, data.val, train_config(sc, c.sweep.layers), c.seed, echo(ws, run));
    save_log(ws, run, r);
    row.student_top1 = r.log.back().val_top1;
    rows.push_back(row);
    csv += fmt(rho, 2) + "," + fmt(row.teacher_top1) + "," + fmt(row.student_top1) + "," + fmt(row.gap()) + "\n";
  }
  write_atomic(ws.report("sweep_retention.csv").string(), csv);
  return rows;
}

std::vector<LayerAuprc> analyze(const Workspace& ws) {
  const ExperimentConfig& c = ws.config;
  const Model model = require_checkpoint(ws, c.analysis.checkpoint);
  const Splits data = load_splits(c);
  const Dataset sample = data.val.subset(c.analysis.samples);
  if (sample.size() == 0) throw ContractError("analyze: validation set is empty");
  std::optional<MaskSpec> masks = c.analysis.masks;
  if (!masks && !model.halting.empty()) masks = c.distill.masks;
  if (masks && model.halting.empty()) throw ContractError("analyze: masks need a model with halting heads");

  const ForwardResult trace = trace_layers(model, sample.images, sample.size(), masks);
  const std::size_t t = model.config.tokens(), n = sample.size();
  json index = json::array();
  std::vector<LayerAuprc> out;
  std::string retention = "layer,retention\n";
  for (std::size_t l = 0; l < model.config.layers; ++l) {
    std::vector<std::vector<double>> sample_importance(n, std::vector<double>(t, 0.0));
    InteractionMap layer_map{t, std::vector<double>(t * t, 0.0), true};
    for (std::size_t h = 0; h < model.config.heads; ++h) {
      const auto maps = interaction_maps(model, l, h, trace.layer_inputs[l]);
      const InteractionMap avg = average_maps(maps);
      for (std::size_t b = 0; b < n; ++b) {
        const auto s = token_importance(maps[b]);
        for (std::size_t j = 0; j < t; ++j) sample_importance[b][j] += s[j];
      }
      for (std::size_t k = 0; k < avg.values.size(); ++k) layer_map.values[k] += avg.values[k];

      const std::string name = "layer" + std::to_string(l) + "_head" + std::to_string(h);
      std::string csv;
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < t; ++j) csv += (j ? "," : "") + fmt(avg.at(i, j), 9);
        csv += "\n";
      }
      write_atomic((ws.root / "maps" / (name + ".csv")).string(), csv);
      json entry = {{"layer", l}, {"head", h}, {"mixer", mixer_name(model.config.mixer(l))},
                    {"gradient", "maps/" + name + ".csv"}};
      if (model.config.mixer(l) == MixerKind::kAttention) {
        const InteractionMap att = attention_score_map(model, l, h, trace.layer_inputs[l]);
        std::string acsv;
        for (std::size_t i = 0; i < t; ++i) {
          for (std::size_t j = 0; j < t; ++j) acsv += (j ? "," : "") + fmt(att.at(i, j), 9);
          acsv += "\n";
        }
        write_atomic((ws.root / "maps" / (name + "_attention.csv")).string(), acsv);
        entry["attention"] = "maps/" + name + "_attention.csv";
      }
      index.push_back(entry);
    }
    const auto importance = token_importance(layer_map);
    std::string icsv = "token,importance\n";
    for (std::size_t j = 0; j < t; ++j) icsv += std::to_string(j) + "," + fmt(importance[j], 9) + "\n";
    write_atomic((ws.root / "importance" / ("layer" + std::to_string(l) + ".csv")).string(), icsv);

    // Retained patch tokens against per-sample importance; the class token
    // is always kept and is left out.
    LayerAuprc row;
    row.layer = l;
    double kept = 0;
    for (std::size_t b = 0; b < n; ++b) {
      std::vector<std::uint8_t> labels(trace.masks[l].begin() + b * t + 1, trace.masks[l].begin() + (b + 1) * t);
      std::vector<double> scores(sample_importance[b].begin() + 1, sample_importance[b].end());
      kept += static_cast<double>(std::count(labels.begin(), labels.end(), 1)) / static_cast<double>(t - 1);
      if (std::find(labels.begin(), labels.end(), 1) == labels.end()) continue;
      row.auprc += auprc(labels, scores);
      row.random += random_auprc(labels, c.analysis.random_trials, mix_seed(mix_seed(c.seed, stream::kAnalysis), b));
      ++row.samples;
    }
    if (row.samples) {
      row.auprc /= static_cast<double>(row.samples);
      row.random /= static_cast<double>(row.samples);
    }
    retention += std::to_string(l) + "," + fmt(kept / static_cast<double>(n), 6) + "\n";
    out.push_back(row);
  }
  write_atomic((ws.root / "maps" / "index.json").string(), index.dump(2) + "\n");
  write_atomic((ws.root / "retention.csv").string(), retention);
  json aj = {{"checkpoint", c.analysis.checkpoint}, {"samples", n}, {"layers", json::array()}};
  for (const auto& r : out) {
    aj["layers"].push_back({{"layer", r.layer}, {"auprc", r.auprc}, {"random", r.random}, {"samples", r.samples}});
  }
  write_atomic((ws.root / "auprc.json").string(), aj.dump(2) + "\n");
  return out;
}

std::vector<ProfileEntry> profile(const Workspace& ws) {
  const ExperimentConfig& c = ws.config;
  const ProfileConfig& p = c.profile;
  if (std::find(p.checkpoints.begin(), p.checkpoints.end(), p.baseline) == p.checkpoints.end()) {
    throw ConfigError("profile.baseline must be one of profile.checkpoints");
  }
  const Splits data = load_splits(c);
  const TimingOptions opts{p.repeats, p.warmup, p.batch};

  struct Subject {
    std::string name;
    Model model;
    std::vector<double> ratios;
    double top1;
  };
  std::vector<Subject> subjects;
  for (const auto& name : p.checkpoints) {
    Model m = require_checkpoint(ws, name);
    const auto masks = own_eval_masks(m, c.distill.masks);
    const EvalResult ev = evaluate(m, data.val, masks);
    std::vector<double> ratios(m.config.layers, 1.0);
    if (p.retention) {
      ratios.assign(m.config.layers, *p.retention);
    } else if (masks) {
      ratios = ev.retention_per_layer;
    }
    for (double& r : ratios) r = std::clamp(r, 1e-9, 1.0);
    subjects.push_back({name, std::move(m), std::move(ratios), ev.top1});
  }

  std::vector<ProfileEntry> entries;
  json pj = {{"scales", json::array()}};
  for (std::size_t image : p.images) {
    json scale = {{"image", image}, {"entries", json::array()}};
    std::vector<ProfileEntry> at_scale;
    double t_fix = 0;
    for (const auto& s : subjects) {
      ModelConfig cfg = s.model.config;
      cfg.image = image;
      try {
        cfg.validate();
      } catch (const Error& e) {
        throw ConfigError("profile.images: " + std::string(e.what()));
      }
      Rng rng(mix_seed(c.seed, stream::kInit));
      const Model sized = init_model(cfg, rng);
      if (s.name == p.baseline) t_fix = measure_fixed_cost(sized, opts, c.seed);
      const auto counts = retention_to_token_counts(s.ratios, cfg.tokens());
      at_scale.push_back({s.name, image, measure_token_throughput(sized, counts, opts, c.seed)});
      ws.say("profile " + s.name + " image " + std::to_string(image) + ": " +
             fmt(at_scale.back().report.throughput, 2) + " tokens/ms");
    }
    const auto base = std::find_if(at_scale.begin(), at_scale.end(), [&](auto& e) { return e.model == p.baseline; });
    const ProfileReport baseline = base->report;
    for (auto& e : at_scale) {
      e.report.t_fix = t_fix;
      e.report.t_model = t_fix + e.report.t_mix;
      e.report.speedup = estimate_model_speedup(baseline, e.report, t_fix);
      json ej = json::parse(report_json(e.report));
      ej["model"] = e.model;
      ej["tokens"] = cfg_tokens(image, subjects.front().model.config.patch);
      scale["entries"].push_back(ej);
      entries.push_back(e);
    }
    pj["scales"].push_back(scale);
  }
  write_atomic(ws.report("profile.json").string(), pj.dump(2) + "\n");

  std::string csv = "model,layers,retention,top1";
  for (std::size_t image : p.images) {
    const std::string tag = std::to_string(cfg_tokens(image, c.model.patch));
    csv += ",throughput_T" + tag + ",speedup_T" + tag;
  }
  csv += "\n";
  for (const auto& s : subjects) {
    std::string mixers;
    for (std::size_t l = 0; l < s.model.config.layers; ++l) {
      mixers += (l ? ";" : "") + std::string(mixer_name(s.model.config.mixer(l)));
    }
    double mean_ratio = 0;
    for (double r : s.ratios) mean_ratio += r / static_cast<double>(s.ratios.size());
    csv += s.name + "," + mixers + "," + fmt(mean_ratio, 3) + "," + fmt(100 * s.top1, 2);
    for (const auto& e : entries) {
      if (e.model == s.name) csv += "," + fmt(e.report.throughput, 2) + "," + format_speedup(e.report.speedup);
    }
    csv += "\n";
  }
  write_atomic(ws.report("profile.csv").string(), csv);
  return entries;
}

void report(const Workspace& ws) {
  const ExperimentConfig& c = ws.config;
  std::string runs = "run,epochs,final_loss_total,final_loss_cls,final_loss_sim,final_val_top1,best_val_top1\n";
  if (fs::exists(ws.root / "logs")) {
    std::vector<fs::path> logs;
    for (const auto& e : fs::directory_iterator(ws.root / "logs")) {
      if (e.path().extension() == ".jsonl") logs.push_back(e.path());
    }
    std::sort(logs.begin(), logs.end());
    for (const auto& path : logs) {
      std::ifstream in(path);
      std::string line;
      json last;
      double best = 0;
      std::size_t rows = 0;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
          last = json::parse(line);
        } catch (const json::exception& e) {
          throw FormatError(path.string() + ": line " + std::to_string(rows + 1) + ": " + e.what());
        }
        best = std::max(best, last.value("val_top1", 0.0));
        ++rows;
      }
      if (rows == 0) continue;
      runs += path.stem().string() + "," + std::to_string(last.value("epoch", 0)) + "," +
              fmt(last.value("loss_total", 0.0), 6) + "," + fmt(last.value("loss_cls", 0.0), 6) + "," +
              fmt(last.value("loss_sim", 0.0), 6) + "," + fmt(last.value("val_top1", 0.0)) + "," + fmt(best) + "\n";
    }
  }
  write_atomic(ws.report("runs.csv").string(), runs);

  std::string ckpts = "checkpoint,mixers,parameters,val_top1\n";
  if (fs::exists(ws.root / "checkpoints")) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(ws.root / "checkpoints")) {
      if (e.path().extension() == ".ckpt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (!files.empty()) {
      const Splits data = load_splits(c);
      for (const auto& f : files) {
        const Model m = load_checkpoint(f.string());
        std::string mixers;
        for (std::size_t l = 0; l < m.config.layers; ++l) {
          mixers += (l ? ";" : "") + std::string(mixer_name(m.config.mixer(l)));
        }
        const double top1 = evaluate(m, data.val, own_eval_masks(m, c.distill.masks)).top1;
        ckpts += f.stem().string() + "," + mixers + "," + std::to_string(parameter_count(m)) + "," + fmt(top1) +
                 "\n";
        ws.say(f.stem().string() + ": val_top1 " + fmt(top1));
      }
    }
  }
  write_atomic(ws.report("checkpoints.csv").string(), ckpts);
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"train-teacher", "replace", "distill", "ablate-groups",
                                              "sweep-retention", "analyze", "profile", "report"};
  return names;
}

void run_command(const std::string& command, const Workspace& ws) {
  if (command == "train-teacher") {
    train_teacher(ws);
  } else if (command == "replace") {
    build_student(ws);
  } else if (command == "distill") {
    distill_student(ws);
  } else if (command == "ablate-groups") {
    ablate_groups(ws);
  } else if (command == "sweep-retention") {
    sweep_retention(ws);
  } else if (command == "analyze") {
    analyze(ws);
  } else if (command == "profile") {
    profile(ws);
  } else if (command == "report") {
    report(ws);
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
}

}  // namespace seqswap
