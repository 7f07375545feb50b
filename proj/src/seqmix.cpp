#include "seqswap/seqmix.hpp"

#include <cmath>

#include "seqswap/error.hpp"

namespace seqswap {

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor linear_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return uniform_tensor({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

// Step-size bias so that softplus(b_dt) = 0.1 at init.
const double kInitDtBias = std::log(std::expm1(0.1));

ScanParams init_scan(MixerKind kind, std::size_t dh, std::size_t ds, Rng& rng) {
  if (kind == MixerKind::kSeqLstm) {
    LstmParams p;
    p.w_x = linear_weight(dh, 4 * dh, rng);
    p.w_h = linear_weight(dh, 4 * dh, rng);
    p.bias = Tensor::zeros({4 * dh}, true);
    return p;
  }
  SsmParams p;
  p.w_dt = linear_weight(dh, 1, rng);
  p.b_dt = Tensor::filled({1}, kInitDtBias, true);
  p.w_b = linear_weight(dh, ds, rng);
  p.w_c = linear_weight(dh, ds, rng);
  // A = -(1, 2, ..., Ds)
  std::vector<double> la(ds);
  for (std::size_t i = 0; i < ds; ++i) la[i] = std::log(static_cast<double>(i + 1));
  p.log_a = Tensor({ds}, std::move(la), true);
  p.d_skip = Tensor::filled({dh}, 1.0, true);
  return p;
}

void collect_scan(const ScanParams& sp, const std::string& prefix, std::vector<NamedTensor>& out) {
  if (const auto* l = std::get_if<LstmParams>(&sp)) {
    out.push_back({prefix + ".w_x", l->w_x});
    out.push_back({prefix + ".w_h", l->w_h});
    out.push_back({prefix + ".bias", l->bias});
  } else {
    const auto& s = std::get<SsmParams>(sp);
    out.push_back({prefix + ".w_dt", s.w_dt});
    out.push_back({prefix + ".b_dt", s.b_dt});
    out.push_back({prefix + ".w_b", s.w_b});
    out.push_back({prefix + ".w_c", s.w_c});
    out.push_back({prefix + ".log_a", s.log_a});
    out.push_back({prefix + ".d_skip", s.d_skip});
  }
}

ScanParams clone_scan(const ScanParams& sp) {
  if (const auto* l = std::get_if<LstmParams>(&sp)) {
    return LstmParams{l->w_x.clone(), l->w_h.clone(), l->bias.clone()};
  }
  const auto& s = std::get<SsmParams>(sp);
  return SsmParams{s.w_dt.clone(), s.b_dt.clone(), s.w_b.clone(),
                   s.w_c.clone(),  s.log_a.clone(), s.d_skip.clone()};
}

}  // namespace

const char* mixer_name(MixerKind kind) {
  switch (kind) {
    case MixerKind::kAttention: return "attention";
    case MixerKind::kSeqLstm: return "lstm";
    case MixerKind::kSeqSsm: return "ssm";
  }
  return "?";
}

MixerKind parse_mixer_kind(const std::string& name) {
  if (name == "attention") return MixerKind::kAttention;
  if (name == "lstm") return MixerKind::kSeqLstm;
  if (name == "ssm") return MixerKind::kSeqSsm;
  throw ContractError("unknown mixer kind '" + name + "' (expected attention, lstm or ssm)");
}

void SeqMixerParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".w_in", w_in});
  for (std::size_t n = 0; n < heads.size(); ++n) {
    const std::string hp = prefix + ".head" + std::to_string(n);
    collect_scan(heads[n].forward, hp + ".fwd", out);
    collect_scan(heads[n].reverse, hp + ".rev", out);
    out.push_back({hp + ".merge", heads[n].merge});
  }
  out.push_back({prefix + ".w_out", w_out});
}

SeqMixerParams SeqMixerParams::clone() const {
  SeqMixerParams c;
  c.kind = kind;
  c.w_in = w_in.clone();
  c.w_out = w_out.clone();
  for (const SeqHead& h : heads) c.heads.push_back({clone_scan(h.forward), clone_scan(h.reverse), h.merge.clone()});
  return c;
}

SeqMixerParams init_seq_mixer(MixerKind kind, std::size_t dim, std::size_t heads,
                              std::size_t state_dim, Rng& rng) {
  if (kind == MixerKind::kAttention) throw ContractError("init_seq_mixer: attention is not sequential");
  if (heads == 0 || dim % heads != 0) throw ShapeError("init_seq_mixer: dim must be divisible by heads");
  const std::size_t dh = dim / heads;
  const std::size_t ds = state_dim == 0 ? dh : state_dim;
  SeqMixerParams p;
  p.kind = kind;
  p.w_in = linear_weight(dim, dim, rng);
  for (std::size_t n = 0; n < heads; ++n) {
    SeqHead h;
    h.forward = init_scan(kind, dh, ds, rng);
    h.reverse = init_scan(kind, dh, ds, rng);
    h.merge = linear_weight(2 * dh, dh, rng);
    p.heads.push_back(std::move(h));
  }
  p.w_out = linear_weight(dim, dim, rng);
  return p;
}

Tensor lstm_scan(const Tensor& seq, const LstmParams& p, const Segments& segs) {
  return lstm_recurrence(add_bias(matmul(seq, p.w_x), p.bias), p.w_h, segs);
}

Tensor ssm_scan(const Tensor& seq, const SsmParams& p, const Segments& segs) {
  const Tensor dt = softplus(add_bias(matmul(seq, p.w_dt), p.b_dt));
  const Tensor b = matmul(seq, p.w_b);
  const Tensor c = matmul(seq, p.w_c);
  const Tensor a = scale(exp(p.log_a), -1.0);
  return add(ssm_recurrence(seq, dt, b, c, a, segs), mul_row(seq, p.d_skip));
}

Tensor run_scan(const Tensor& seq, const ScanParams& p, const Segments& segs) {
  if (const auto* l = std::get_if<LstmParams>(&p)) return lstm_scan(seq, *l, segs);
  return ssm_scan(seq, std::get<SsmParams>(p), segs);
}

MixerTrace multihead_bidi_mixer(const Tensor& u, const SeqMixerParams& params, const Segments& segs) {
  const std::size_t dim = params.w_in.rows();
  const std::size_t nh = params.heads.size();
  if (u.rank() != 2 || u.cols() != dim) throw ShapeError("multihead_bidi_mixer: input width mismatch");
  if (segs.total() != u.rows()) throw ShapeError("multihead_bidi_mixer: segments do not cover the rows");
  const std::size_t dh = dim / nh;
  const std::vector<std::size_t> rev = reverse_index(segs);

  MixerTrace trace;
  const Tensor split = matmul(u, params.w_in);
  for (std::size_t n = 0; n < nh; ++n) {
    const SeqHead& head = params.heads[n];
    const Tensor in_n = slice_cols(split, n * dh, (n + 1) * dh);
    Tensor fwd = run_scan(in_n, head.forward, segs);
    Tensor bwd = gather_rows(run_scan(gather_rows(in_n, rev), head.reverse, segs), rev);
    trace.head_outputs.push_back(matmul(concat_cols({fwd, bwd}), head.merge));
    trace.forward_branches.push_back(std::move(fwd));
    trace.reverse_branches.push_back(std::move(bwd));
  }
  trace.out = matmul(concat_cols(trace.head_outputs), params.w_out);
  return trace;
}

std::size_t scan_param_count(const ScanParams& p) {
  std::vector<NamedTensor> v;
  collect_scan(p, "", v);
  std::size_t n = 0;
  for (const auto& t : v) n += t.tensor.size();
  return n;
}

}  // namespace seqswap
