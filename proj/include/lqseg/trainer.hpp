#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lqseg/dataset_io.hpp"
#include "lqseg/losses.hpp"
#include "lqseg/metrics.hpp"
#include "lqseg/model.hpp"

namespace lqseg {

struct TrainConfig {
  int iterations = 5625;  // one "1x" schedule
  int batch_size = 2;
  int warmup_iters = 100;
  int checkpoint_every = 500;
  double base_lr = 1e-4;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  double lambda_cls = 1.0;
  double lambda_mask = 1.0;
  double lambda_attr = 1.0;
  std::uint64_t seed = 1;
  int stages = 3;
  int d = 64;
  int n_q = 20;
  int image_size = 128;
  std::string dataset_path;
  std::string out_dir;
};

// Decoupled-weight-decay adaptive-moment optimizer. Moment buffers are
// index-aligned with the parameter list they were built from.
class AdamW {
 public:
  AdamW(const std::vector<std::pair<std::string, Tensor>>& params,
        double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  void step(std::vector<std::pair<std::string, Tensor>>& params, double lr);
  void zero_grad(std::vector<std::pair<std::string, Tensor>>& params);

  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t t) { step_count_ = t; }

  // Moment buffers exposed as tensors for checkpointing ("opt.m.*"/"opt.v.*").
  void export_state(std::vector<std::pair<std::string, Tensor>>& out) const;
  void import_state(const std::vector<std::pair<std::string, Tensor>>& tensors);
  void round_state_to_f32();

 private:
  double weight_decay_, beta1_, beta2_, eps_;
  std::int64_t step_count_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> m_, v_;
};

// Scales all gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_global_norm(std::vector<std::pair<std::string, Tensor>>& params,
                        double max_norm);

// Large-scale jittering with an explicit ratio (unit ratio is the identity).
Scene lsj_apply(const Tensor& image, const SceneAnnotation& ann, double ratio,
                Rng& rng);
// Samples ratio in [0.5, 2.0]; if every instance is lost, resamples a bounded
// number of times and finally returns the scene unaugmented.
Scene lsj_augment(const Tensor& image, const SceneAnnotation& ann, Rng& rng);

// Linear warmup to base_lr, then x0.1 at 2/3 and again at 8/9 of the run.
double lr_schedule(int step, const TrainConfig& cfg);

// One optimization step over a batch: forward, per-stage matching, composed
// loss, backward, clip, update. Components in the returned report are batch
// means; total_value is recomposed from them.
LossReport train_step(const std::vector<Scene>& batch, Model& model, AdamW& opt,
                      const TrainConfig& cfg, double lr);

struct TrainOutcome {
  std::string final_checkpoint;
  int iterations_run = 0;
};

// Full loop: augmentation, schedule, logging (one JSON line per iteration),
// periodic checkpoints. Model parameters and optimizer state pass through f32
// at every checkpoint write, so resuming reproduces the uninterrupted run.
TrainOutcome run_training(const TrainConfig& cfg,
                          const std::optional<std::string>& resume_path,
                          std::ostream& log);

nlohmann::json train_config_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Inference over a scene list with a deterministic per-image worker pool.
EvalReport evaluate_model(const Model& model, const std::vector<Scene>& scenes,
                          double fixed_f1_threshold = -1.0, int threads = 0);

}  // namespace lqseg
