#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lqseg/decoder.hpp"
#include "lqseg/encoder.hpp"
#include "lqseg/synthdata.hpp"

namespace lqseg {

struct ModelConfig {
  int d = 64;
  int n_q = 20;
  int stages = 3;
  int k_cls = kNumClasses;
  int k_attr = kNumAttributes;
};

struct ForwardOutput {
  FeaturePyramid pyramid;
  QuerySet queries;
  std::vector<StagePrediction> stages;
};

// Owns every learnable parameter. Forward passes share parameters read-only;
// mutation (optimizer updates, checkpoint loads) happens between passes.
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  ForwardOutput forward(const Tensor& image) const;

  const ModelConfig& config() const { return cfg_; }
  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  std::int64_t param_count() const;

  EncoderParams& encoder() { return encoder_; }
  DecoderParams& decoder() { return decoder_; }

 private:
  ModelConfig cfg_;
  EncoderParams encoder_;
  DecoderParams decoder_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace lqseg
