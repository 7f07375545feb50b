#pragma once

// Multihead bidirectional sequential token mixer. The input is split into
// head subspaces, each head runs one scan over the tokens in order and one
// over the reversed tokens, the two results are merged back to the head
// width, and the heads are concatenated and projected.

#include <string>
#include <variant>
#include <vector>

#include "seqswap/rng.hpp"
#include "seqswap/tensor.hpp"

namespace seqswap {

enum class MixerKind { kAttention, kSeqLstm, kSeqSsm };

const char* mixer_name(MixerKind kind);
MixerKind parse_mixer_kind(const std::string& name);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct LstmParams {
  Tensor w_x;   // [Dh x 4Dh]
  Tensor w_h;   // [Dh x 4Dh]
  Tensor bias;  // [4Dh]
};

// Simplified selective scan: scalar step size per token, diagonal decay
// A = -exp(log_a), input-dependent B and C shared by the head's channels.
struct SsmParams {
  Tensor w_dt;    // [Dh x 1]
  Tensor b_dt;    // [1]
  Tensor w_b;     // [Dh x Ds]
  Tensor w_c;     // [Dh x Ds]
  Tensor log_a;   // [Ds]
  Tensor d_skip;  // [Dh]
};

using ScanParams = std::variant<LstmParams, SsmParams>;

struct SeqHead {
  ScanParams forward;
  ScanParams reverse;
  Tensor merge;  // [2Dh x Dh]
};

struct SeqMixerParams {
  MixerKind kind = MixerKind::kSeqLstm;
  Tensor w_in;   // [D x D]
  std::vector<SeqHead> heads;
  Tensor w_out;  // [D x D]

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
  SeqMixerParams clone() const;
};

// Everything a mixer produces; per-head tensors are taken before the final
// output projection.
struct MixerTrace {
  Tensor out;
  std::vector<Tensor> head_outputs;
  std::vector<Tensor> forward_branches;  // sequential mixers only
  std::vector<Tensor> reverse_branches;
  std::vector<std::vector<double>> attention_probs;  // attention only
};

SeqMixerParams init_seq_mixer(MixerKind kind, std::size_t dim, std::size_t heads,
                              std::size_t state_dim, Rng& rng);

Tensor lstm_scan(const Tensor& seq, const LstmParams& p, const Segments& segs);
Tensor ssm_scan(const Tensor& seq, const SsmParams& p, const Segments& segs);
Tensor run_scan(const Tensor& seq, const ScanParams& p, const Segments& segs);

MixerTrace multihead_bidi_mixer(const Tensor& u, const SeqMixerParams& params, const Segments& segs);

std::size_t scan_param_count(const ScanParams& p);

}  // namespace seqswap
