#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "seqswap/analysis.hpp"
#include "seqswap/error.hpp"

using namespace seqswap;

namespace {

ModelConfig small(MixerKind kind, bool halting = false) {
  ModelConfig c;
  c.layers = 2;
  c.dim = 8;
  c.heads = 2;
  c.image = 4;
  c.patch = 2;
  c.classes = 3;
  c.halting = halting;
  c.mixers = {kind, kind};
  return c;
}

Tensor random_inputs(const ModelConfig& c, std::size_t batch, Rng& rng) {
  return oracle::random_tensor({batch * c.tokens(), c.dim}, rng, -1, 1, false);
}

// Sum of row i of the chosen per-head signal for one sample.
double probe(const Model& m, std::size_t layer, std::size_t head, const Tensor& x, std::size_t i, MapTarget target) {
  NoGradScope off;
  const Block& b = m.blocks[layer];
  const MixerTrace tr = apply_mixer(m, layer, layer_norm(x, b.ln1.gamma, b.ln1.beta),
                                    Segments::uniform(1, m.config.tokens()));
  const Tensor& u = target == MapTarget::kHead            ? tr.head_outputs[head]
                    : target == MapTarget::kForwardBranch ? tr.forward_branches[head]
                                                          : tr.reverse_branches[head];
  double s = 0;
  for (std::size_t k = 0; k < u.cols(); ++k) s += u.at(i, k);
  return s;
}

}  // namespace

TEST_CASE("interaction map matches finite differences") {
  const double step = 1e-6;
  for (MixerKind kind : {MixerKind::kAttention, MixerKind::kSeqLstm, MixerKind::kSeqSsm}) {
    CAPTURE(mixer_name(kind));
    Rng rng(21);
    Model m = init_model(small(kind), rng);
    const std::size_t t = m.config.tokens(), d = m.config.dim;
    Tensor x = random_inputs(m.config, 1, rng);
    std::vector<MapTarget> targets{MapTarget::kHead};
    if (kind != MixerKind::kAttention) {
      targets.push_back(MapTarget::kForwardBranch);
      targets.push_back(MapTarget::kReverseBranch);
    }
    for (MapTarget target : targets) {
      const InteractionMap map = interaction_map(m, 1, 1, x, target);
      double worst = 0;
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < t; ++j) {
          double fd = 0;
          for (std::size_t k = 0; k < d; ++k) {
            Tensor xp = x.clone(), xm = x.clone();
            xp.data()[j * d + k] += step;
            xm.data()[j * d + k] -= step;
            fd += std::fabs((probe(m, 1, 1, xp, i, target) - probe(m, 1, 1, xm, i, target)) / (2 * step));
          }
          worst = std::max(worst, std::fabs(fd - map.at(i, j)) / std::max(std::fabs(fd), 1e-3));
        }
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("maps of a pointwise mixer are diagonal") {
  Rng rng(22);
  Model m = init_model(small(MixerKind::kSeqSsm), rng);
  auto& mixer = std::get<SeqMixerParams>(m.blocks[0].mixer);
  for (auto& h : mixer.heads) {
    for (ScanParams* sp : {&h.forward, &h.reverse}) {
      auto& p = std::get<SsmParams>(*sp);
      std::fill(p.w_b.data().begin(), p.w_b.data().end(), 0.0);
    }
  }
  const InteractionMap map = interaction_map(m, 0, 0, random_inputs(m.config, 3, rng));
  for (std::size_t i = 0; i < map.tokens; ++i)
    for (std::size_t j = 0; j < map.tokens; ++j) {
      if (i == j) {
        CHECK(map.at(i, j) > 0);
      } else {
        CHECK(map.at(i, j) == 0.0);
      }
    }
  const auto s = token_importance(map);
  for (std::size_t j = 0; j < map.tokens; ++j) CHECK(s[j] == map.at(j, j));
}

TEST_CASE("branch maps are triangular and the bidirectional map is dense") {
  for (MixerKind kind : {MixerKind::kSeqLstm, MixerKind::kSeqSsm}) {
    CAPTURE(mixer_name(kind));
    Rng rng(23);
    Model m = init_model(small(kind), rng);
    const Tensor x = random_inputs(m.config, 4, rng);
    const InteractionMap fwd = interaction_map(m, 0, 0, x, MapTarget::kForwardBranch);
    const InteractionMap rev = interaction_map(m, 0, 0, x, MapTarget::kReverseBranch);
    const InteractionMap full = interaction_map(m, 0, 0, x);
    CHECK(full.batch_averaged);
    double above = 0, below = 0, dense = 0;
    for (std::size_t i = 0; i < fwd.tokens; ++i)
      for (std::size_t j = 0; j < fwd.tokens; ++j) {
        if (j > i) above = std::max(above, fwd.at(i, j)), dense = std::max(dense, full.at(i, j));
        if (j < i) below = std::max(below, rev.at(i, j));
        CHECK(full.at(i, j) >= 0);
      }
    CHECK(above < 1e-12);
    CHECK(below < 1e-12);
    CHECK(dense > 1e-8);
  }
}

TEST_CASE("per-sample maps average to the batch map") {
  Rng rng(24);
  Model m = init_model(small(MixerKind::kSeqLstm), rng);
  const Tensor x = random_inputs(m.config, 3, rng);
  const auto maps = interaction_maps(m, 1, 0, x);
  REQUIRE(maps.size() == 3);
  const auto single = interaction_map(m, 1, 0, Tensor({m.config.tokens(), m.config.dim},
                                                      std::vector<double>(x.data().begin() + m.config.tokens() * 8,
                                                                          x.data().begin() + 2 * m.config.tokens() * 8)));
  for (std::size_t k = 0; k < single.values.size(); ++k) CHECK(std::fabs(single.values[k] - maps[1].values[k]) < 1e-14);
  CHECK_THROWS_AS(interaction_map(m, 2, 0, x), ContractError);
  CHECK_THROWS_AS(interaction_map(m, 0, 2, x), ContractError);
  // No stray gradients are left on the parameters.
  for (const auto& p : m.parameters()) CHECK_FALSE(p.tensor.has_grad());
}

TEST_CASE("attention score map") {
  Rng rng(25);
  Model m = init_model(small(MixerKind::kAttention), rng);
  const Tensor x = random_inputs(m.config, 3, rng);
  const InteractionMap a = attention_score_map(m, 0, 1, x);
  for (std::size_t i = 0; i < a.tokens; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < a.tokens; ++j) row += a.at(i, j);
    CHECK(std::fabs(row - 1.0) < 1e-9);
  }
  auto& p = std::get<AttentionParams>(m.blocks[0].mixer);
  std::fill(p.wk.data().begin(), p.wk.data().end(), 0.0);
  const InteractionMap u = attention_score_map(m, 0, 0, x);
  for (double v : u.values) CHECK(std::fabs(v - 1.0 / u.tokens) < 1e-15);

  Model s = init_model(small(MixerKind::kSeqSsm), rng);
  CHECK_THROWS_AS(attention_score_map(s, 0, 0, x), ContractError);
}

TEST_CASE("token importance") {
  InteractionMap id{3, {1, 0, 0, 0, 1, 0, 0, 0, 1}, false};
  CHECK(token_importance(id) == std::vector<double>{1, 1, 1});
  InteractionMap m{2, {1, 2, 3, 4}, false};
  CHECK(token_importance(m) == std::vector<double>{4, 6});
}

TEST_CASE("auprc") {
  std::vector<std::uint8_t> all{1, 1, 1};
  std::vector<double> sc{0.3, 0.1, 0.2};
  CHECK(auprc(all, sc) == 1.0);
  std::vector<std::uint8_t> sep{0, 1, 1, 0, 1};
  CHECK(auprc(sep, std::vector<double>{0.1, 0.9, 0.8, 0.2, 0.7}) == 1.0);
  std::vector<std::uint8_t> ex{1, 0, 1, 0};
  std::vector<double> exs{0.9, 0.8, 0.7, 0.1};
  CHECK(auprc(ex, exs) == oracle::auprc_by_thresholds({1, 0, 1, 0}, exs));
  CHECK(std::fabs(auprc(ex, exs) - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)) < 1e-15);
  // Tied scores form one threshold.
  CHECK(auprc(std::vector<std::uint8_t>{1, 0}, std::vector<double>{0.5, 0.5}) == 0.5);
  std::vector<std::uint8_t> none{0, 0};
  CHECK_THROWS_AS(auprc(none, std::vector<double>{0.1, 0.2}), ContractError);
  CHECK_THROWS_AS(auprc(none, std::vector<double>{0.1}), ShapeError);
}

TEST_CASE("auprc equals exhaustive threshold enumeration") {
  std::size_t mismatches = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    std::vector<double> scores(8);
    // Coarse scores so that ties occur.
    for (double& s : scores) s = seed % 2 ? rng.uniform() : static_cast<double>(rng.below(4));
    for (unsigned pattern = 1; pattern < 256; ++pattern) {
      std::vector<std::uint8_t> labels(8);
      std::vector<int> ilabels(8);
      for (int k = 0; k < 8; ++k) ilabels[k] = labels[k] = (pattern >> k) & 1u;
      mismatches += auprc(labels, scores) != oracle::auprc_by_thresholds(ilabels, scores);
    }
  }
  CHECK(mismatches == 0);
}

TEST_CASE("importance ranking beats random scores") {
  Rng rng(26);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(16);
    for (double& v : s) v = rng.uniform();
    std::vector<std::size_t> order(16);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return s[a] > s[b]; });
    std::vector<std::uint8_t> keep(16, 0);
    for (std::size_t k = 0; k < 5; ++k) keep[order[k]] = 1;
    CHECK(auprc(keep, s) == 1.0);
    CHECK(random_auprc(keep, 100, trial) < 1.0);
  }
  std::vector<std::uint8_t> labels{1, 0, 0, 1};
  CHECK(random_auprc(labels, 100, 3) == random_auprc(labels, 100, 3));
}

TEST_CASE("retention profile") {
  Rng rng(27);
  ModelConfig c = small(MixerKind::kAttention, true);
  c.layers = 3;
  c.mixers = {MixerKind::kAttention, MixerKind::kSeqSsm, MixerKind::kSeqLstm};
  Model m = init_model(c, rng);
  Dataset d;
  d.side = c.image;
  d.classes = c.classes;
  for (int n = 0; n < 12; ++n) {
    for (std::size_t k = 0; k < c.image_size(); ++k) d.images.push_back(rng.uniform());
    d.labels.push_back(0);
  }
  MaskSpec spec;
  spec.threshold = 0.99;

  SUBCASE("no halting mass keeps every token") {
    for (auto& h : m.halting) h.beta.data()[0] = -60.0;
    for (double r : retention_profile(m, d, spec)) CHECK(r == 1.0);
  }
  SUBCASE("recount oracle") {
    for (auto& h : m.halting) {
      h.gamma.data()[0] = rng.uniform(-2, 2);
      h.beta.data()[0] = rng.uniform(-1, 0.5);
    }
    const auto prof = retention_profile(m, d, spec);
    const ForwardResult r = trace_layers(m, d.images, d.size(), spec);
    const std::size_t t = c.tokens();
    for (std::size_t l = 0; l < c.layers; ++l) {
      double total = 0;
      for (std::size_t b = 0; b < d.size(); ++b) {
        double on = 0;
        for (std::size_t i = 1; i < t; ++i) on += r.masks[l][b * t + i];
        total += on / (t - 1);
      }
      CHECK(std::fabs(prof[l] - total / d.size()) < 1e-12);
      if (l > 0) CHECK(prof[l] <= prof[l - 1]);
    }
    const auto depth = token_depths(r.masks, t);
    for (std::size_t row = 0; row < depth.size(); ++row) {
      for (std::size_t l = 0; l < c.layers; ++l) CHECK(r.masks[l][row] == (l < depth[row] ? 1 : 0));
    }
  }
  SUBCASE("requires halting heads") {
    Model plain = init_model(small(MixerKind::kAttention), rng);
    CHECK_THROWS_AS(retention_profile(plain, d, spec), ContractError);
  }
}
