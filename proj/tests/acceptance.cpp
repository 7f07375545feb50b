// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--criteria 1,2,...] [--seeds 3] [--work DIR] [--verbose]

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "seqswap/analysis.hpp"
#include "seqswap/checkpoint.hpp"
#include "seqswap/distill.hpp"
#include "seqswap/error.hpp"
#include "seqswap/experiments.hpp"
#include "seqswap/profiling.hpp"

using namespace seqswap;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", 100 * v);
  return buf;
}

bool g_verbose = false;

void note(const std::string& line) {
  if (g_verbose) std::fprintf(stderr, "  %s\n", line.c_str());
}

// ---------------------------------------------------------------- 1

Outcome gradient_correctness() {
  double worst = 0;
  std::string where;
  std::size_t checked = 0;
  for (MixerKind kind : {MixerKind::kAttention, MixerKind::kSeqLstm, MixerKind::kSeqSsm}) {
    Rng rng(100 + static_cast<int>(kind));
    const std::size_t t = 5, d = 8, heads = 2;
    std::vector<NamedTensor> leaves;
    Tensor u = oracle::random_tensor({t, d}, rng);
    leaves.push_back({"input", u});
    AttentionParams ap;
    SeqMixerParams sp;
    if (kind == MixerKind::kAttention) {
      ap = {oracle::random_tensor({d, d}, rng, -0.5, 0.5), oracle::random_tensor({d, d}, rng, -0.5, 0.5),
            oracle::random_tensor({d, d}, rng, -0.5, 0.5), oracle::random_tensor({d, d}, rng, -0.5, 0.5)};
      leaves.insert(leaves.end(), {{"wq", ap.wq}, {"wk", ap.wk}, {"wv", ap.wv}, {"wo", ap.wo}});
    } else {
      sp = init_seq_mixer(kind, d, heads, 0, rng);
      sp.collect("seq", leaves);
    }
    const Tensor w = oracle::random_tensor({t, d}, rng, -1, 1, false);
    const Segments segs = Segments::uniform(1, t);
    auto loss = [&] {
      const MixerTrace tr = kind == MixerKind::kAttention ? attention_mixer(u, ap, heads, segs)
                                                          : multihead_bidi_mixer(u, sp, segs);
      return oracle::weighted_sum(tr.out, w);
    };
    const auto res = oracle::grad_check(leaves, loss, 1e-6, 1e-4);
    checked += res.checked;
    if (res.max_rel_err >= worst) {
      worst = res.max_rel_err;
      where = std::string(mixer_name(kind)) + " " + res.worst;
    }
    note(std::string(mixer_name(kind)) + ": " + std::to_string(res.checked) + " entries, max rel err " +
         sci(res.max_rel_err));
  }
  return {worst < 1e-5, std::to_string(checked) + " entries over 3 mixers, max rel err " + sci(worst) +
                            " (< 1e-05) at " + where};
}

// ---------------------------------------------------------------- 2

Outcome interface_preservation() {
  Rng rng(200);
  ModelConfig c;
  const Model teacher = init_model(c, rng);
  std::vector<double> images(2 * c.image_size());
  for (double& v : images) v = rng.uniform();
  NoGradScope off;
  const Shape want = forward(teacher, images, 2).logits.shape();
  std::size_t ok = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::set<std::size_t> r;
    for (std::size_t l = 0; l < c.layers; ++l) {
      if (rng.uniform() < 0.5) r.insert(l);
    }
    const MixerKind kind = rng.uniform() < 0.5 ? MixerKind::kSeqLstm : MixerKind::kSeqSsm;
    const Model student = replace_layers(teacher, r, kind, rng);
    bool same = forward(student, images, 2).logits.shape() == want;
    std::map<std::string, Tensor> theirs;
    for (const auto& p : teacher.parameters()) theirs.emplace(p.name, p.tensor);
    for (const auto& p : student.parameters()) {
      const bool replaced = std::any_of(r.begin(), r.end(), [&](std::size_t l) { return is_mixer_param(p.name, l); });
      if (replaced) continue;
      auto it = theirs.find(p.name);
      same = same && it != theirs.end() && it->second.shape() == p.tensor.shape() &&
             std::equal(p.tensor.data().begin(), p.tensor.data().end(), it->second.data().begin());
    }
    ok += same;
  }
  return {ok == 20, std::to_string(ok) + "/20 replacement sets keep the output shape and every other parameter"};
}

// ---------------------------------------------------------------- 3

Outcome halting_invariants() {
  Rng rng(300);
  std::size_t bad = 0;
  const std::size_t sequences = 10000;
  for (std::size_t s = 0; s < sequences; ++s) {
    const std::size_t t = 2 + rng.below(8), layers = 1 + rng.below(12);
    const double threshold = rng.uniform() < 0.5 ? 1.0 : rng.uniform(0.5, 1.0);
    std::vector<double> r(t, 0.0);
    Mask prev;
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t i = 0; i < t; ++i) {
        // Occasionally saturate so that halting actually happens.
        const double h = rng.uniform() < 0.1 ? 1.0 : rng.uniform();
        const double next = update_cumulative(r[i], h);
        if (next < r[i] || next < 0.0 || next > 1.0) ++bad;
        r[i] = next;
      }
      Mask m = threshold_masks(r, t, threshold, l ? &prev : nullptr);
      for (std::size_t i = 0; i < t; ++i) {
        if (l && m[i] > prev[i]) ++bad;
        if (m[i] != (i == 0 || r[i] < threshold ? 1 : 0) && (l == 0 || prev[i])) ++bad;
      }
      if (!m[0]) ++bad;
      prev = std::move(m);
    }
  }
  const bool eq = update_cumulative(0.5, 0.5) == 0.75;
  return {bad == 0 && eq, std::to_string(sequences) + " sequences, " + std::to_string(bad) +
                              " violations; update_cumulative(0.5, 0.5) = " + std::to_string(update_cumulative(0.5, 0.5))};
}

// ---------------------------------------------------------------- 4

// Softmax attention in which inactive keys get -inf logits and inactive
// queries produce zero rows.
std::vector<double> masked_attention_reference(const Tensor& u, const AttentionParams& p, std::size_t heads,
                                               std::size_t t, const Mask& mask) {
  NoGradScope off;
  const Tensor q = matmul(u, p.wq), k = matmul(u, p.wk), v = matmul(u, p.wv);
  const std::size_t rows = u.rows(), d = u.cols(), dh = d / heads;
  std::vector<double> o(rows * d, 0.0);
  for (std::size_t s = 0; s < rows / t; ++s)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < t; ++i) {
        const std::size_t qi = s * t + i;
        if (!mask[qi]) continue;
        std::vector<double> logit(t, -std::numeric_limits<double>::infinity());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < t; ++j) {
          const std::size_t kj = s * t + j;
          if (!mask[kj]) continue;
          double acc = 0;
          for (std::size_t c = 0; c < dh; ++c) acc += q.at(qi, h * dh + c) * k.at(kj, h * dh + c);
          logit[j] = acc / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, logit[j]);
        }
        double z = 0;
        for (double& l : logit) z += (l = std::exp(l - mx));
        for (std::size_t j = 0; j < t; ++j)
          for (std::size_t c = 0; c < dh; ++c) o[qi * d + h * dh + c] += logit[j] / z * v.at(s * t + j, h * dh + c);
      }
  std::vector<double> out(rows * d, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) out[r * d + b] += o[r * d + a] * p.wo.at(a, b);
  return out;
}

Outcome compression_exactness() {
  Rng rng(400);
  const std::size_t t = 9, batch = 3, d = 8, heads = 2;
  NoGradScope off;
  double pointwise = 0, attn = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Mask mask(batch * t);
    for (std::size_t r = 0; r < mask.size(); ++r) mask[r] = r % t == 0 || rng.uniform() < 0.6;
    const Tensor u = oracle::random_tensor({batch * t, d}, rng, -1, 1, false);
    const Tensor w = oracle::random_tensor({d, d}, rng, -1, 1, false);
    const TokenIndex idx = active_index(mask, t);
    std::vector<double> weights(mask.begin(), mask.end());

    const Tensor fast = restore_tokens(gelu(matmul(compress_tokens(u, idx), w)), idx, u.rows());
    const Tensor ref = mask_rows(gelu(matmul(u, w)), weights);
    for (std::size_t k = 0; k < fast.size(); ++k) pointwise = std::max(pointwise, std::fabs(fast.at(k) - ref.at(k)));

    AttentionParams p{oracle::random_tensor({d, d}, rng, -1, 1, false), oracle::random_tensor({d, d}, rng, -1, 1, false),
                      oracle::random_tensor({d, d}, rng, -1, 1, false), oracle::random_tensor({d, d}, rng, -1, 1, false)};
    const Tensor got = restore_tokens(attention_mixer(compress_tokens(u, idx), p, heads, idx.segments).out, idx, u.rows());
    const auto want = masked_attention_reference(u, p, heads, t, mask);
    for (std::size_t k = 0; k < want.size(); ++k) attn = std::max(attn, std::fabs(got.at(k) - want[k]));
  }
  return {pointwise < 1e-12 && attn < 1e-9,
          "100 masks: pointwise max |diff| " + sci(pointwise) + " (< 1e-12), attention max |diff| " + sci(attn) +
              " (< 1e-09)"};
}

// ---------------------------------------------------------------- 5

Outcome loss_stack() {
  Rng rng(500);
  ModelConfig c;
  c.halting = true;
  const Model teacher = init_model(c, rng);
  for (auto& h : teacher.halting) h.beta.data()[0] = -1.0;
  const Model same = teacher.clone();
  std::vector<double> images(4 * c.image_size());
  for (double& v : images) v = rng.uniform();
  std::vector<int> labels{0, 1, 2, 3};

  ForwardOptions o;
  o.keep_mixer_outputs = true;
  NoGradScope off;
  const auto a = forward(teacher, images, 4, o), b = forward(same, images, 4, o);
  const double sim_same = similarity_loss(a.mixer_outputs, b.mixer_outputs, {0, 1, 2, 3}).item();

  const LossWeights w;
  const bool coeffs = w.cls == 1.0 && w.sim == 0.75 && w.mask == 0.1 && w.avit == 0.1;
  double arith = 0;
  for (int n = 0; n < 100; ++n) {
    const double s = rng.uniform(0, 5), h = rng.uniform(0, 5), k = rng.uniform(0, 5);
    LossBreakdown out;
    const double total = stage1_total(Tensor::scalar(s), Tensor::scalar(h), Tensor::scalar(k), w, out).item();
    arith = std::max(arith, std::fabs(total - (1.0 * k + 0.75 * s + 0.1 * h)));
  }

  bool nonneg = true;
  Model student = replace_layers(teacher, {2, 3}, MixerKind::kSeqSsm, rng);
  for (Stage st : {Stage::kSupervised, Stage::kDense, Stage::kStage1, Stage::kStage2}) {
    TrainConfig tc;
    tc.stage = st;
    tc.replaced = {2, 3};
    tc.masks = {MaskMode::kFixedRetention, 1.0, 0.6};
    LossBreakdown out;
    batch_loss(student, &teacher, tc, images, labels, out);
    nonneg = nonneg && out.total >= 0 && out.cls >= 0 && out.sim >= 0 && out.halt >= 0 && out.avit >= 0;
  }
  return {sim_same == 0.0 && coeffs && arith < 1e-12 && nonneg,
          "L_sim(identical) = " + sci(sim_same) + ", stage-1 arithmetic max err " + sci(arith) +
              " (< 1e-12) with weights 1.0/0.75/0.1/0.1, losses nonnegative: " + (nonneg ? "yes" : "no")};
}

// ---------------------------------------------------------------- 6

Outcome auprc_oracle() {
  std::size_t cases = 0, mismatches = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(600 + seed);
    std::vector<double> scores(8);
    for (double& s : scores) s = rng.uniform();
    for (unsigned pattern = 1; pattern < 256; ++pattern) {
      std::vector<std::uint8_t> labels(8);
      std::vector<int> ilabels(8);
      for (int k = 0; k < 8; ++k) ilabels[k] = labels[k] = (pattern >> k) & 1u;
      mismatches += auprc(labels, scores) != oracle::auprc_by_thresholds(ilabels, scores);
      ++cases;
    }
  }
  return {mismatches == 0, std::to_string(cases) + " label patterns x scores, " + std::to_string(mismatches) +
                               " differ from exhaustive enumeration"};
}

// ---------------------------------------------------------------- 7

Outcome interaction_causality() {
  double above = 0, below = 0, dense = 0;
  for (MixerKind kind : {MixerKind::kSeqLstm, MixerKind::kSeqSsm}) {
    Rng rng(700);
    ModelConfig c;
    c.layers = 1;
    c.dim = 16;
    c.heads = 2;
    c.mixers = {kind};
    const Model m = init_model(c, rng);
    const Tensor x = oracle::random_tensor({2 * c.tokens(), c.dim}, rng, -1, 1, false);
    for (std::size_t h = 0; h < c.heads; ++h) {
      const auto f = interaction_map(m, 0, h, x, MapTarget::kForwardBranch);
      const auto r = interaction_map(m, 0, h, x, MapTarget::kReverseBranch);
      const auto full = interaction_map(m, 0, h, x);
      double head_dense = 0;
      for (std::size_t i = 0; i < f.tokens; ++i)
        for (std::size_t j = 0; j < f.tokens; ++j) {
          if (j > i) above = std::max(above, f.at(i, j)), head_dense = std::max(head_dense, full.at(i, j));
          if (j < i) below = std::max(below, r.at(i, j));
        }
      dense = dense == 0 ? head_dense : std::min(dense, head_dense);
    }
  }
  return {above < 1e-12 && below < 1e-12 && dense > 1e-8,
          "forward-branch max above diagonal " + sci(above) + ", reverse-branch max below diagonal " + sci(below) +
              " (< 1e-12); smallest bidirectional super-diagonal max " + sci(dense) + " (> 1e-08)"};
}

// ---------------------------------------------------------------- 8

Outcome throughput_arithmetic() {
  std::vector<LayerTiming> one{{0, 10, 2.0}}, two{{0, 10, 1.0}, {1, 5, 1.0}};
  const double tp1 = token_throughput(one), tp2 = token_throughput(two);
  const ProfileReport attn = make_report({{0, 10, 4.0}}, 8.0), seq = make_report({{0, 10, 2.0}}, 8.0);
  const double s = estimate_model_speedup(attn, seq, 8.0), same = estimate_model_speedup(attn, attn, 8.0);
  return {tp1 == 5.0 && tp2 == 7.5 && s == 1.2 && same == 1.0,
          "TP " + std::to_string(tp1) + " and " + std::to_string(tp2) + ", speedup " + std::to_string(s) +
              ", identical reports " + std::to_string(same)};
}

// ---------------------------------------------------------------- 9-11

ExperimentConfig toy_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.teacher.epochs = 10;
  c.teacher.lr = 2e-3;
  c.distill.stage = Stage::kStage1;
  c.distill.epochs = 12;
  c.distill.lr = 5e-3;
  c.replace.layers = {3};
  return c;
}

Workspace workspace(const fs::path& root, ExperimentConfig config, const std::string& tag) {
  Workspace ws;
  ws.config = std::move(config);
  ws.root = root;
  if (g_verbose) ws.progress = [tag](const std::string& line) { std::fprintf(stderr, "  [%s] %s\n", tag.c_str(), line.c_str()); };
  return ws;
}

// Dense teachers are shared by the convergence and layer-group criteria.
double ensure_teacher(const Workspace& ws) {
  if (!fs::exists(ws.checkpoint("teacher"))) train_teacher(ws);
  const Model t = load_checkpoint(ws.checkpoint("teacher").string());
  return evaluate(t, load_splits(ws.config).val).top1;
}

Outcome toy_convergence(const fs::path& work, std::size_t seeds) {
  std::map<MixerKind, std::size_t> passes;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    const std::string tag = "seed" + std::to_string(seed);
    Workspace ws = workspace(work / ("dense_" + tag), toy_config(seed), tag);
    const double teacher = ensure_teacher(ws);
    detail += tag + ": teacher " + pct(teacher);
    for (MixerKind kind : {MixerKind::kSeqLstm, MixerKind::kSeqSsm}) {
      ws.config.replace.kind = kind;
      build_student(ws);
      const TrainResult r = distill_student(ws);
      const double sim0 = r.log.front().loss.sim, sim1 = r.log.back().loss.sim;
      const double drop = 1.0 - sim1 / sim0, student = r.log.back().val_top1;
      const bool ok = teacher >= 0.95 && drop >= 0.90 && teacher - student <= 0.03;
      passes[kind] += ok;
      detail += std::string(", ") + mixer_name(kind) + " sim -" + pct(drop) + " top1 " + pct(student) +
                (ok ? "" : " (miss)");
    }
    detail += "; ";
  }
  const bool pass = passes[MixerKind::kSeqLstm] >= 2 && passes[MixerKind::kSeqSsm] >= 2;
  return {pass, detail + "seeds passing: lstm " + std::to_string(passes[MixerKind::kSeqLstm]) + ", ssm " +
                    std::to_string(passes[MixerKind::kSeqSsm]) + " of " + std::to_string(seeds) + " (need 2)"};
}

Outcome layer_group_trend(const fs::path& work, std::size_t seeds) {
  std::map<MixerKind, std::size_t> passes;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    const std::string tag = "seed" + std::to_string(seed);
    ExperimentConfig c = toy_config(seed);
    Workspace dense = workspace(work / ("dense_" + tag), c, tag);
    ensure_teacher(dense);
    c.ablation.groups = {{0}, {3}};
    c.ablation.include_none = false;
    c.ablation.include_full = false;
    c.ablation.train.epochs = 50;
    c.ablation.train.lr = 2e-3;
    c.ablation.train.policy = TrainablePolicy::kReplacedOnly;
    c.data.train_limit = 400;
    c.data.val_limit = 250;
    Workspace ws = workspace(dense.root, c, tag);
    const auto rows = ablate_groups(ws);
    detail += tag + ":";
    for (std::size_t k = 0; k < c.ablation.kinds.size(); ++k) {
      const double first = rows[0].top1[k], last = rows[1].top1[k];
      passes[c.ablation.kinds[k]] += last >= first;
      detail += std::string(" ") + mixer_name(c.ablation.kinds[k]) + " first " + pct(first) + " last " + pct(last);
    }
    detail += "; ";
  }
  const bool pass = passes[MixerKind::kSeqLstm] >= 2 && passes[MixerKind::kSeqSsm] >= 2;
  return {pass, detail + "last >= first in lstm " + std::to_string(passes[MixerKind::kSeqLstm]) + ", ssm " +
                    std::to_string(passes[MixerKind::kSeqSsm]) + " of " + std::to_string(seeds) + " seeds (need 2)"};
}

Outcome sparsity_gap_trend(const fs::path& work, std::size_t seeds) {
  std::size_t passes = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    const std::string tag = "seed" + std::to_string(seed);
    ExperimentConfig c = toy_config(seed);
    c.model.halting = true;
    c.teacher.masks = {MaskMode::kFixedRetention, 0.99, 1.0};
    c.sweep.retentions = {1.0, 0.8, 0.6};
    c.sweep.layers = {1, 2, 3};
    c.sweep.kind = MixerKind::kSeqLstm;
    c.sweep.train.epochs = 8;
    c.sweep.train.lr = 2e-3;
    Workspace ws = workspace(work / ("halting_" + tag), c, tag);
    if (!fs::exists(ws.checkpoint("teacher"))) train_teacher(ws);
    const auto rows = sweep_retention(ws);
    const double g_full = rows.front().gap(), g_sparse = rows.back().gap();
    passes += g_sparse <= g_full;
    detail += tag + ": gap " + pct(g_full) + " at 1.0, " + pct(rows[1].gap()) + " at 0.8, " + pct(g_sparse) +
              " at 0.6; ";
  }
  return {passes >= 2, detail + std::to_string(passes) + " of " + std::to_string(seeds) + " seeds (need 2)"};
}

// ---------------------------------------------------------------- 12

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome reproducibility(const fs::path& work) {
  ExperimentConfig c = toy_config(12);
  c.model.halting = true;
  c.data.synthetic.train = 256;
  c.data.synthetic.val = 64;
  c.teacher.epochs = 2;
  c.distill.epochs = 2;
  std::string logs[2];
  for (int run = 0; run < 2; ++run) {
    Workspace ws = workspace(work / ("repro_" + std::to_string(run)), c, "repro");
    train_teacher(ws);
    build_student(ws);
    distill_student(ws);
    logs[run] = slurp(ws.log("teacher")) + slurp(ws.log("distill_stage1"));
  }
  const fs::path ckpt = work / "repro_0" / "checkpoints" / "student_stage1.ckpt";
  const Model m = load_checkpoint(ckpt.string());
  const fs::path again = work / "repro_0" / "again.ckpt";
  save_checkpoint(m, again.string());
  const bool bytes = slurp(ckpt) == slurp(again);
  const Model back = load_checkpoint(again.string());
  Rng rng(1200);
  bool outputs = true;
  NoGradScope off;
  for (int n = 0; n < 10; ++n) {
    std::vector<double> img(c.model.image_size());
    for (double& v : img) v = rng.uniform();
    const auto x = forward(m, img, 1).logits, y = forward(back, img, 1).logits;
    outputs = outputs && std::equal(x.data().begin(), x.data().end(), y.data().begin());
  }
  const bool same_logs = !logs[0].empty() && logs[0] == logs[1];
  return {same_logs && bytes && outputs, std::string("metrics logs identical: ") + (same_logs ? "yes" : "no") +
                                             ", checkpoint bytes identical: " + (bytes ? "yes" : "no") +
                                             ", forward outputs identical on 10 inputs: " + (outputs ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> only;
  std::size_t seeds = 3;
  std::string work = (fs::temp_directory_path() / "seqswap_acceptance").string();
  bool keep = false;
  CLI::App app{"seqswap acceptance criteria"};
  app.add_option("--criteria", only, "Criteria to run (default: all)")->delimiter(',');
  app.add_option("--seeds", seeds, "Seeds for the trend criteria")->check(CLI::Range(1, 10));
  app.add_option("--work", work, "Scratch directory for experiment artifacts");
  app.add_flag("--keep", keep, "Keep artifacts from earlier runs");
  app.add_flag("--verbose,-v", g_verbose, "Print progress");
  CLI11_PARSE(app, argc, argv);

  if (!keep) fs::remove_all(work);
  fs::create_directories(work);
  const fs::path w(work);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"interface preservation", interface_preservation},
      {"halting invariants", halting_invariants},
      {"compression exactness", compression_exactness},
      {"loss stack", loss_stack},
      {"AUPRC oracle equivalence", auprc_oracle},
      {"interaction-map causality", interaction_causality},
      {"throughput and speedup arithmetic", throughput_arithmetic},
      {"toy distillation convergence", [&] { return toy_convergence(w, seeds); }},
      {"layer-group trend", [&] { return layer_group_trend(w, seeds); }},
      {"sparsity-gap trend", [&] { return sparsity_gap_trend(w, seeds); }},
      {"reproducibility and persistence", [&] { return reproducibility(w); }},
  };

  std::size_t failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] %2d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
    ++ran;
  }
  std::printf("%zu/%zu criteria passed\n", ran - failed, ran);
  return failed ? 1 : 0;
}
