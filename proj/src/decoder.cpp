#include "lqseg/decoder.hpp"

#include <cmath>

#include "lqseg/errors.hpp"

namespace lqseg {

namespace {

AttentionParams init_attention(int d, Rng& rng) {
  AttentionParams a;
  for (Tensor* w : {&a.w_q, &a.w_k, &a.w_v, &a.w_o}) {
    *w = kaiming_uniform({d, d}, d, rng);
    w->set_requires_grad(true);
  }
  a.ln1_gain = Tensor::full({d}, 1.0, true);
  a.ln1_offset = Tensor::zeros({d}, true);
  a.ln2_gain = Tensor::full({d}, 1.0, true);
  a.ln2_offset = Tensor::zeros({d}, true);
  a.ff_w1 = kaiming_uniform({d, 4 * d}, d, rng);
  a.ff_w1.set_requires_grad(true);
  a.ff_b1 = Tensor::zeros({4 * d}, true);
  a.ff_w2 = kaiming_uniform({4 * d, d}, 4 * d, rng);
  a.ff_w2.set_requires_grad(true);
  a.ff_b2 = Tensor::zeros({d}, true);
  return a;
}

void collect_attention(AttentionParams& a, const std::string& prefix,
                       std::vector<std::pair<std::string, Tensor>>& out) {
  out.emplace_back(prefix + ".w_q", a.w_q);
  out.emplace_back(prefix + ".w_k", a.w_k);
  out.emplace_back(prefix + ".w_v", a.w_v);
  out.emplace_back(prefix + ".w_o", a.w_o);
  out.emplace_back(prefix + ".ln1_gain", a.ln1_gain);
  out.emplace_back(prefix + ".ln1_offset", a.ln1_offset);
  out.emplace_back(prefix + ".ln2_gain", a.ln2_gain);
  out.emplace_back(prefix + ".ln2_offset", a.ln2_offset);
  out.emplace_back(prefix + ".ff_w1", a.ff_w1);
  out.emplace_back(prefix + ".ff_b1", a.ff_b1);
  out.emplace_back(prefix + ".ff_w2", a.ff_w2);
  out.emplace_back(prefix + ".ff_b2", a.ff_b2);
}

}  // namespace

DecoderParams init_decoder(int d, int k_cls, int k_attr, int num_stages, Rng& rng) {
  if (num_stages != 1 && num_stages != 3)
    throw ContractError("init_decoder: stages must be 1 or 3, got " +
                        std::to_string(num_stages));
  DecoderParams p;
  p.d = d;
  p.k_cls = k_cls;
  p.k_attr = k_attr;
  for (int s = 0; s < num_stages; ++s) {
    StageParams st;
    st.internal_attn = init_attention(d, rng);
    st.external_attn = init_attention(d, rng);
    st.cls_w = kaiming_uniform({d, k_cls + 1}, d, rng);
    st.cls_w.set_requires_grad(true);
    st.cls_b = Tensor::zeros({k_cls + 1}, true);
    // Attribute features are unnormalized spatial sums and run far hotter
    // than unit variance; shrink the head init so initial logits stay in the
    // active region of the binary losses.
    st.attr_w = kaiming_uniform({d, k_attr}, d, rng);
    for (std::int64_t i = 0; i < st.attr_w.numel(); ++i) st.attr_w.data()[i] /= d;
    st.attr_w.set_requires_grad(true);
    st.attr_b = Tensor::zeros({k_attr}, true);
    p.stages.push_back(std::move(st));
  }
  return p;
}

void collect_decoder_params(DecoderParams& p,
                            std::vector<std::pair<std::string, Tensor>>& out) {
  for (std::size_t s = 0; s < p.stages.size(); ++s) {
    const std::string prefix = "decoder.stage" + std::to_string(s + 1);
    collect_attention(p.stages[s].internal_attn, prefix + ".internal", out);
    collect_attention(p.stages[s].external_attn, prefix + ".external", out);
    out.emplace_back(prefix + ".cls_w", p.stages[s].cls_w);
    out.emplace_back(prefix + ".cls_b", p.stages[s].cls_b);
    out.emplace_back(prefix + ".attr_w", p.stages[s].attr_w);
    out.emplace_back(prefix + ".attr_b", p.stages[s].attr_b);
  }
}

Tensor initial_mask(const Tensor& queries, const Tensor& fused) {
  if (queries.ndim() != 2 || fused.ndim() != 3 || queries.dim(1) != fused.dim(0))
    throw ShapeError("initial_mask: channel mismatch between queries " +
                     shape_str(queries.shape()) + " and fused map " +
                     shape_str(fused.shape()));
  const int h = fused.dim(1), w = fused.dim(2);
  Tensor flat = reshape(fused, {fused.dim(0), h * w});
  return reshape(matmul(queries, flat), {queries.dim(0), h, w});
}

Tensor mask_to_tokens(const Tensor& mask_logits, const Tensor& fused) {
  if (mask_logits.ndim() != 3 || fused.ndim() != 3 ||
      mask_logits.dim(1) != fused.dim(1) || mask_logits.dim(2) != fused.dim(2))
    throw ShapeError("mask_to_tokens: spatial mismatch between masks " +
                     shape_str(mask_logits.shape()) + " and fused map " +
                     shape_str(fused.shape()));
  const int n_q = mask_logits.dim(0);
  const int hw = mask_logits.dim(1) * mask_logits.dim(2);
  Tensor weights = sigmoid(reshape(mask_logits, {n_q, hw}));         // [n_q, hw]
  Tensor pooled = matmul(weights, transpose(reshape(fused, {fused.dim(0), hw})));
  Tensor denom = add_scalar(row_sums(weights), 1e-6);
  return div_rowwise(pooled, denom);
}

namespace {
Tensor ffn(const Tensor& x, const AttentionParams& p) {
  Tensor hidden = relu(add_rowvec(matmul(x, p.ff_w1), p.ff_b1));
  return add_rowvec(matmul(hidden, p.ff_w2), p.ff_b2);
}
}  // namespace

std::pair<Tensor, Tensor> attention_stage(const Tensor& queries, const Tensor& tokens,
                                          const AttentionParams& p, const Tensor& fused) {
  if (queries.ndim() != 2 || tokens.ndim() != 2 || queries.dim(1) != tokens.dim(1))
    throw ShapeError("attention_stage: query/token width mismatch " +
                     shape_str(queries.shape()) + " vs " + shape_str(tokens.shape()));
  const int d = queries.dim(1);
  Tensor q_proj = matmul(queries, p.w_q);
  Tensor k_proj = matmul(tokens, p.w_k);
  Tensor v_proj = matmul(tokens, p.w_v);
  Tensor scores = mul_scalar(matmul(q_proj, transpose(k_proj)), 1.0 / std::sqrt(d));
  Tensor attn = softmax(scores, 1);
  Tensor attended = matmul(matmul(attn, v_proj), p.w_o);
  Tensor q1 = layer_norm_rows(add(queries, attended), p.ln1_gain, p.ln1_offset);
  Tensor q2 = layer_norm_rows(add(q1, ffn(q1, p)), p.ln2_gain, p.ln2_offset);
  return {q2, initial_mask(q2, fused)};
}

MultiLayeredOutput multi_layered_attention(const Tensor& queries, const Tensor& fused,
                                           const StageParams& p) {
  Tensor m0 = initial_mask(queries, fused);
  Tensor t0 = mask_to_tokens(m0, fused);
  auto [ext_queries, m1] = attention_stage(queries, t0, p.internal_attn, fused);
  Tensor t1 = mask_to_tokens(m1, fused);
  auto [final_queries, m2] = attention_stage(ext_queries, t1, p.external_attn, fused);
  return {m1, m2, final_queries};
}

Tensor mlr_attribute_features(const Tensor& prev_mask_logits,
                              const std::array<Tensor, 4>& levels,
                              const Tensor& queries, int stage_index) {
  if (stage_index < 1 || stage_index > 3)
    throw ContractError("mlr_attribute_features: stage index must be in {1,2,3}, got " +
                        std::to_string(stage_index));
  const int n_q = queries.dim(0);
  const int d = queries.dim(1);
  Tensor acc;
  for (const Tensor& level : levels) {
    const int h = level.dim(1), w = level.dim(2);
    const int hw = h * w;
    Tensor weights = sigmoid(reshape(resize_bilinear(prev_mask_logits, h, w), {n_q, hw}));
    Tensor flat = reshape(level, {d, hw});
    Tensor gate = sigmoid(matmul(queries, flat));                 // [n_q, hw]
    Tensor pooled = matmul(mul(weights, gate), transpose(flat));  // [n_q, d]
    acc = acc.defined() ? add(acc, pooled) : pooled;
  }
  return mul_scalar(acc, 0.25);
}

std::pair<Tensor, Tensor> predict_heads(const Tensor& queries_final,
                                        const Tensor& attr_features,
                                        const StageParams& p) {
  Tensor cls = add_rowvec(matmul(queries_final, p.cls_w), p.cls_b);
  Tensor attr = add_rowvec(matmul(attr_features, p.attr_w), p.attr_b);
  return {cls, attr};
}

std::vector<StagePrediction> run_decoder(const QuerySet& queries,
                                         const FeaturePyramid& pyramid,
                                         const DecoderParams& params) {
  std::vector<StagePrediction> out;
  Tensor q = queries.combined;
  Tensor prev_mask = initial_mask(q, pyramid.fused);
  for (std::size_t s = 0; s < params.stages.size(); ++s) {
    const StageParams& stage = params.stages[s];
    MultiLayeredOutput mla = multi_layered_attention(q, pyramid.fused, stage);
    Tensor attr_feat = mlr_attribute_features(prev_mask, pyramid.levels,
                                              mla.queries_final,
                                              static_cast<int>(s) + 1);
    auto [cls_logits, attr_logits] = predict_heads(mla.queries_final, attr_feat, stage);
    out.push_back({mla.final_mask, cls_logits, attr_logits, mla.queries_final});
    q = mla.queries_final;
    prev_mask = mla.final_mask;
  }
  return out;
}

}  // namespace lqseg
