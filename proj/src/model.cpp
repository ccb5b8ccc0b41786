#include "lqseg/model.hpp"

namespace lqseg {

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  Rng enc_rng(derive_seed(seed, 0x454e43));
  encoder_ = init_encoder(cfg.d, cfg.n_q, enc_rng);
  Rng dec_rng(derive_seed(seed, 0x444543));
  decoder_ = init_decoder(cfg.d, cfg.k_cls, cfg.k_attr, cfg.stages, dec_rng);
  collect_encoder_params(encoder_, params_);
  collect_decoder_params(decoder_, params_);
}

ForwardOutput Model::forward(const Tensor& image) const {
  ForwardOutput out;
  EncoderOutput enc = encode(image, encoder_);
  out.pyramid = std::move(enc.pyramid);
  out.queries = std::move(enc.queries);
  out.stages = run_decoder(out.queries, out.pyramid, decoder_);
  return out;
}

std::int64_t Model::param_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

}  // namespace lqseg
