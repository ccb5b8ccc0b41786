#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lqseg/encoder.hpp"
#include "lqseg/tensor.hpp"

namespace lqseg {

// Single-head attention block parameters: projections, the two layer norms
// around the residual connections, and the d -> 4d -> d feed-forward.
struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;      // [d, d]
  Tensor ln1_gain, ln1_offset;    // [d]
  Tensor ln2_gain, ln2_offset;    // [d]
  Tensor ff_w1, ff_b1;            // [d, 4d], [4d]
  Tensor ff_w2, ff_b2;            // [4d, d], [d]
};

// One cascade stage: the two chained attention passes (internal, then
// external over the refreshed tokens) plus this stage's prediction heads.
struct StageParams {
  AttentionParams internal_attn;
  AttentionParams external_attn;
  Tensor cls_w, cls_b;    // [d, k_cls+1], [k_cls+1]
  Tensor attr_w, attr_b;  // [d, k_attr], [k_attr]
};

struct DecoderParams {
  int d = 64;
  int k_cls = 4;
  int k_attr = 9;
  std::vector<StageParams> stages;  // 1 or 3 entries
};

struct StagePrediction {
  Tensor mask_logits;   // [n_q, H4, W4]
  Tensor class_logits;  // [n_q, k_cls+1]
  Tensor attr_logits;   // [n_q, k_attr]
  Tensor queries_out;   // [n_q, d]
};

DecoderParams init_decoder(int d, int k_cls, int k_attr, int num_stages, Rng& rng);
void collect_decoder_params(DecoderParams& p,
                            std::vector<std::pair<std::string, Tensor>>& out);

// Per-query channel inner product with the fused map:
// mask[q,h,w] = sum_c Q[q,c] * F_f[c,h,w].
Tensor initial_mask(const Tensor& queries, const Tensor& fused);

// Mask-weighted average pooling of F_f into one d-vector per query:
// T[q,c] = sum_hw sigmoid(M)[q,hw] * F_f[c,hw] / (sum_hw sigmoid(M)[q,hw] + eps).
Tensor mask_to_tokens(const Tensor& mask_logits, const Tensor& fused);

// One attention pass: softmax(QK^T/sqrt(d)) V with residual+LN and FFN,
// then a fresh mask prediction from the updated queries.
std::pair<Tensor, Tensor> attention_stage(const Tensor& queries, const Tensor& tokens,
                                          const AttentionParams& p, const Tensor& fused);

// The paper's cascade inside a stage: initial product mask, internal
// attention (emitting External Queries + an intermediate prediction),
// external attention, final mask.
struct MultiLayeredOutput {
  Tensor internal_mask;  // prediction emitted by internal attention
  Tensor final_mask;     // prediction emitted by external attention
  Tensor queries_final;
};
MultiLayeredOutput multi_layered_attention(const Tensor& queries, const Tensor& fused,
                                           const StageParams& p);

// Eq.-style multi-level attribute pooling: the previous stage's mask gates
// every pyramid level, modulated by a sigmoid query-feature correlation map;
// levels are averaged. stage_index must be 1, 2 or 3.
Tensor mlr_attribute_features(const Tensor& prev_mask_logits,
                              const std::array<Tensor, 4>& levels,
                              const Tensor& queries, int stage_index);

std::pair<Tensor, Tensor> predict_heads(const Tensor& queries_final,
                                        const Tensor& attr_features,
                                        const StageParams& p);

// Runs every stage; stage j consumes stage j-1's final queries and mask
// (stage 1 consumes the encoder queries and the initial product mask).
std::vector<StagePrediction> run_decoder(const QuerySet& queries,
                                         const FeaturePyramid& pyramid,
                                         const DecoderParams& params);

}  // namespace lqseg
