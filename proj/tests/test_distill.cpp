#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "seqswap/distill.hpp"
#include "seqswap/error.hpp"

using namespace seqswap;
using oracle::random_tensor;

namespace {

ModelConfig tiny(bool halting, std::vector<MixerKind> mixers = {}) {
  ModelConfig c;
  c.layers = mixers.empty() ? 2 : mixers.size();
  c.dim = 8;
  c.heads = 2;
  c.image = 4;
  c.patch = 2;
  c.classes = 3;
  c.halting = halting;
  c.mixers = std::move(mixers);
  return c;
}

Dataset random_dataset(std::size_t n, const ModelConfig& c, Rng& rng) {
  Dataset d;
  d.side = c.image;
  d.channels = 1;
  d.classes = c.classes;
  d.images.resize(n * c.image_size());
  for (double& v : d.images) v = rng.uniform();
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(rng.below(c.classes)));
  return d;
}

bool same_values(const Model& a, const Model& b, const std::function<bool(const std::string&)>& skip = {}) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (skip && skip(pa[i].name)) continue;
    if (!std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("similarity loss") {
  Rng rng(1);
  Tensor a = random_tensor({6, 4}, rng, -1, 1, false), b = random_tensor({6, 4}, rng, -1, 1, false);
  CHECK(similarity_loss({a}, {a.clone()}, {0}).item() == 0.0);
  CHECK(similarity_loss({add_scalar(a, 1.0)}, {a}, {0}).item() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(similarity_loss({a}, {b}, {}).item() == 0.0);

  // Three samples of T = 2 tokens, two layers of which both are replaced.
  std::vector<Tensor> zs{random_tensor({6, 4}, rng, -1, 1, false), random_tensor({6, 4}, rng, -1, 1, false),
                         random_tensor({6, 4}, rng, -1, 1, false)};
  std::vector<Tensor> zt{random_tensor({6, 4}, rng, -1, 1, false), random_tensor({6, 4}, rng, -1, 1, false),
                         random_tensor({6, 4}, rng, -1, 1, false)};
  double ref = 0;
  for (std::size_t l : {0, 2}) {
    double batch = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      double per = 0;
      for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t d = 0; d < 4; ++d) {
          const double e = zs[l].at(s * 2 + t, d) - zt[l].at(s * 2 + t, d);
          per += e * e;
        }
      batch += per / (2 * 4);
    }
    ref += batch / 3;
  }
  CHECK(std::fabs(similarity_loss(zs, zt, {0, 2}).item() - ref) < 1e-12);
  CHECK_THROWS_AS(similarity_loss({a}, {Tensor::zeros({6, 3})}, {0}), ShapeError);
  CHECK_THROWS_AS(similarity_loss({a}, {b}, {1}), ContractError);
}

TEST_CASE("halting alignment loss") {
  Tensor h({2, 1}, {0.3, 0.8});
  CHECK(halting_alignment_loss({h}, {h.clone()}, {0}).item() == 0.0);
  CHECK(halting_alignment_loss({Tensor({2, 1}, {1.0, 0.5})}, {Tensor({2, 1}, {0.0, 0.5})}, {0}).item() == 0.5);

  Rng rng(2);
  std::vector<Tensor> hs, ht;
  for (int l = 0; l < 3; ++l) {
    hs.push_back(random_tensor({10, 1}, rng, 0, 1, false));
    ht.push_back(random_tensor({10, 1}, rng, 0, 1, false));
  }
  double ref = 0;
  for (std::size_t l : {1, 2}) {
    double s = 0;
    for (std::size_t t = 0; t < 10; ++t) s += (hs[l].at(t) - ht[l].at(t)) * (hs[l].at(t) - ht[l].at(t));
    ref += s / 10;
  }
  CHECK(std::fabs(halting_alignment_loss(hs, ht, {1, 2}).item() - ref) < 1e-12);
}

TEST_CASE("classification loss") {
  std::vector<int> label{3};
  CHECK(std::fabs(cross_entropy(Tensor::zeros({1, 10}), label).item() - std::log(10.0)) < 1e-12);
  std::vector<double> big(10, 0.0);
  big[3] = 30.0;
  CHECK(cross_entropy(Tensor({1, 10}, big), label).item() < 1e-9);

  Rng rng(3);
  Tensor logits = random_tensor({4, 5}, rng, -3, 3, false);
  std::vector<int> labels{0, 4, 2, 2};
  double ref = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double mx = -1e9;
    for (std::size_t k = 0; k < 5; ++k) mx = std::max(mx, logits.at(r, k));
    double z = 0;
    for (std::size_t k = 0; k < 5; ++k) z += std::exp(logits.at(r, k) - mx);
    ref += mx + std::log(z) - logits.at(r, labels[r]);
  }
  CHECK(std::fabs(cross_entropy(logits, labels).item() - ref / 4) < 1e-12);
}

TEST_CASE("halting regularizer") {
  SUBCASE("prior") {
    auto p = halting_prior(4, 2.0, 1.0);
    CHECK(std::fabs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-15);
    CHECK(p[2] > p[1]);
    CHECK(std::fabs(p[1] - p[3]) < 1e-15);
    CHECK_THROWS_AS(halting_prior(4, 2.0, 0.0), ContractError);
  }
  SUBCASE("zero when every token halts and the distribution equals the prior") {
    auto prior = halting_prior(4, 2.0, 1.0);
    std::vector<Tensor> cum;
    double r = 0;
    for (double m : prior) {
      r += m;
      cum.push_back(Tensor::filled({5, 1}, std::min(r, 1.0)));
    }
    cum.back() = Tensor::filled({5, 1}, 1.0);
    CHECK(std::fabs(avit_regularizer(cum, prior, 0.01).item()) < 1e-14);
  }
  SUBCASE("KL of a distribution with itself") {
    Tensor p({1, 3}, {0.2, 0.5, 0.3});
    std::vector<double> q{0.2, 0.5, 0.3};
    CHECK(std::fabs(kl_divergence(p, q).item()) < 1e-16);
  }
  SUBCASE("two-layer toy") {
    std::vector<Tensor> cum{Tensor({2, 1}, {0.2, 0.6}), Tensor({2, 1}, {0.5, 0.9})};
    auto prior = halting_prior(2, 0.0, 1.0);
    const double ponder = (0.5 + 0.1) / 2;
    const double p0 = 0.4 / 0.7, p1 = 0.3 / 0.7;
    const double kl = p0 * std::log(p0 / prior[0]) + p1 * std::log(p1 / prior[1]);
    CHECK(std::fabs(avit_regularizer(cum, prior, 0.01).item() - (ponder + 0.01 * kl)) < 1e-10);
    Tensor dist = halting_distribution(cum);
    CHECK(std::fabs(dist.at(0) - p0) < 1e-15);
  }
}

TEST_CASE("weighted stage totals") {
  LossWeights w;
  CHECK(w.cls == 1.0);
  CHECK(w.sim == 0.75);
  CHECK(w.mask == 0.1);
  CHECK(w.avit == 0.1);
  LossBreakdown b;
  CHECK(stage1_total(Tensor::scalar(0), Tensor::scalar(0), Tensor::scalar(0), w, b).item() == 0.0);
  const double t = stage1_total(Tensor::scalar(2.0), Tensor::scalar(1.0), Tensor::scalar(0.5), w, b).item();
  CHECK(std::fabs(t - 2.1) < 1e-12);
  CHECK(b.sim == 2.0);
  CHECK(b.halt == 1.0);
  CHECK(b.cls == 0.5);
  CHECK(stage2_total(Tensor::scalar(0), Tensor::scalar(0), w, b).item() == 0.0);
  CHECK(std::fabs(stage2_total(Tensor::scalar(1.5), Tensor::scalar(0.4), w, b).item() - 0.55) < 1e-12);
}

TEST_CASE("stage losses have correct gradients") {
  Rng rng(4);
  ModelConfig tc = tiny(true);
  Model teacher = init_model(tc, rng);
  for (auto& h : teacher.halting) h.beta.data()[0] = -0.5;
  Model student = replace_layers(teacher, {1}, MixerKind::kSeqLstm, rng);
  for (auto& p : student.parameters())
    for (double& v : p.tensor.data()) v += rng.uniform(-0.05, 0.05);
  Dataset d = random_dataset(3, tc, rng);

  TrainConfig cfg;
  cfg.replaced = {1};
  cfg.masks.mode = MaskMode::kFixedRetention;
  cfg.masks.retention = 0.5;
  std::vector<NamedTensor> leaves;
  for (const auto& p : student.parameters()) {
    if (p.name.find("seq.head0.fwd") != std::string::npos || p.name.rfind("halt.", 0) == 0 ||
        p.name == "blocks.1.seq.w_in" || p.name == "patch.weight") {
      leaves.push_back(p);
    }
  }
  for (Stage st : {Stage::kStage1, Stage::kStage2, Stage::kDense, Stage::kSupervised}) {
    CAPTURE(stage_name(st));
    cfg.stage = st;
    LossBreakdown b;
    auto res = oracle::grad_check(
        leaves, [&] { return batch_loss(student, &teacher, cfg, d.images, d.labels, b); }, 1e-6, 1e-3);
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-5);
    // Components recombine to the total.
    batch_loss(student, &teacher, cfg, d.images, d.labels, b);
    const auto& w = cfg.weights;
    CHECK(std::fabs(b.total - (w.cls * b.cls + w.sim * b.sim + w.mask * b.halt + w.avit * b.avit)) < 1e-12);
    CHECK(b.cls >= 0);
    CHECK(b.sim >= 0);
    CHECK(b.halt >= 0);
    CHECK(b.avit >= 0);
  }
}

TEST_CASE("teacher masks are shared in stage 1") {
  Rng rng(5);
  ModelConfig tc = tiny(true, {MixerKind::kAttention, MixerKind::kAttention, MixerKind::kAttention});
  Model teacher = init_model(tc, rng);
  for (auto& h : teacher.halting) h.beta.data()[0] = 0.0;
  Model student = replace_layers(teacher, {0, 1, 2}, MixerKind::kSeqSsm, rng);
  for (auto& h : student.halting) h.beta.data()[0] = -3.0;
  Dataset d = random_dataset(4, tc, rng);
  ForwardOptions o;
  o.mask_mode = MaskMode::kFixedRetention;
  o.retention = 0.5;
  ForwardResult tr = forward(teacher, d.images, 4, o);
  ForwardOptions so;
  so.mask_mode = MaskMode::kExternal;
  so.external_masks = &tr.masks;
  ForwardResult sr = forward(student, d.images, 4, so);
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(sr.masks[l] == tr.masks[l]);
    CHECK(active_index(sr.masks[l], tc.tokens()).rows == active_index(tr.masks[l], tc.tokens()).rows);
  }
}

TEST_CASE("training loop") {
  Rng rng(6);
  ModelConfig tc = tiny(true);
  Model teacher = init_model(tc, rng);
  const Model teacher_copy = teacher.clone();
  Dataset train_set = random_dataset(20, tc, rng), val = random_dataset(8, tc, rng);

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.masks.mode = MaskMode::kFixedRetention;
  cfg.masks.retention = 0.75;

  SUBCASE("zero learning rate leaves parameters unchanged") {
    Model s = teacher.clone();
    cfg.lr_max = 0.0;
    cfg.weight_decay = 0.0;
    train(s, nullptr, train_set, val, cfg, 1);
    CHECK(same_values(s, teacher));
  }
  SUBCASE("self-distillation fixed point") {
    Model s = teacher.clone();
    cfg.stage = Stage::kDense;
    cfg.epochs = 0;
    TrainResult r = train(s, &teacher, train_set, val, cfg, 1);
    REQUIRE(r.log.size() == 1);
    CHECK(r.log[0].loss.sim == 0.0);
    TrainConfig sup = cfg;
    sup.stage = Stage::kSupervised;
    Model plain = teacher.clone();
    plain.halting.clear();
    plain.config.halting = false;
    TrainResult base = train(plain, nullptr, train_set, val, sup, 1);
    CHECK(r.log[0].loss.cls == base.log[0].loss.cls);
  }
  SUBCASE("frozen teacher and replaced-only updates") {
    for (Stage st : {Stage::kDense, Stage::kStage1, Stage::kStage2}) {
      Model s = replace_layers(teacher, {1}, MixerKind::kSeqSsm, rng);
      const Model before = s.clone();
      cfg.stage = st;
      cfg.policy = TrainablePolicy::kReplacedOnly;
      cfg.replaced = {1};
      cfg.lr_max = 1e-2;
      TrainResult r = train(s, &teacher, train_set, val, cfg, 2);
      CHECK(same_values(teacher, teacher_copy));
      CHECK(same_values(s, before, [](const std::string& n) { return is_mixer_param(n, 1) || is_halting_param(n, 1); }));
      CHECK_FALSE(same_values(s, before));
      for (const auto& m : r.log) {
        CHECK(m.loss.total >= 0);
        CHECK(m.loss.sim >= 0);
        CHECK(m.retention_per_layer.size() == tc.layers);
      }
    }
  }
  SUBCASE("identical seeds give identical logs") {
    cfg.stage = Stage::kStage1;
    cfg.replaced = {0};
    std::vector<std::string> a, b;
    Model s1 = replace_layers(teacher, {0}, MixerKind::kSeqLstm, rng);
    Model s2 = s1.clone();
    train(s1, &teacher, train_set, val, cfg, 9, [&](const EpochMetrics& m) { a.push_back(metrics_json(m)); });
    train(s2, &teacher, train_set, val, cfg, 9, [&](const EpochMetrics& m) { b.push_back(metrics_json(m)); });
    CHECK(a.size() == 3);
    CHECK(a == b);
    CHECK(same_values(s1, s2));
  }
  SUBCASE("errors") {
    Model s = teacher.clone();
    Dataset empty;
    CHECK_THROWS_AS(train(s, nullptr, empty, val, cfg, 1), ContractError);
    cfg.stage = Stage::kStage1;
    CHECK_THROWS_AS(train(s, nullptr, train_set, val, cfg, 1), ContractError);
    CHECK_THROWS_AS(parse_stage("stage3"), ConfigError);
  }
}

TEST_CASE("metrics json fields") {
  EpochMetrics m;
  m.epoch = 3;
  m.retention_per_layer = {1.0, 0.5};
  const std::string s = metrics_json(m);
  for (const char* key : {"\"epoch\"", "\"lr\"", "\"loss_total\"", "\"loss_cls\"", "\"loss_sim\"", "\"loss_halt\"",
                          "\"loss_avit\"", "\"val_top1\"", "\"retention_per_layer\""}) {
    CHECK(s.find(key) != std::string::npos);
  }
}
