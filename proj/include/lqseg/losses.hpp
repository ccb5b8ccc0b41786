#pragma once

#include <vector>

#include "lqseg/matching.hpp"

namespace lqseg {

// Per-stage component values plus the composed total. Components are plain
// numbers for logging; `total` is the graph scalar used for backward.
struct LossReport {
  std::vector<double> cls;
  std::vector<double> mask_focal;
  std::vector<double> mask_dice;
  std::vector<double> attr;
  double total_value = 0.0;
  Tensor total;  // scalar on the recorded graph
};

// Mean over elements of -alpha_t (1-p_t)^gamma log(p_t) with sigmoid p.
// Targets must be 0/1 exactly.
Tensor focal_loss(const Tensor& logits, const Tensor& targets, double alpha = 0.25,
                  double gamma = 2.0);

// 1 - (2 sum(p*g) + 1) / (sum p + sum g + 1) with sigmoid p; logits and the
// 0/1 ground-truth mask are compared elementwise over any common shape.
Tensor dice_loss(const Tensor& mask_logits, const Tensor& gt_mask);

// Mean binary cross-entropy over every (query, attribute) cell.
Tensor attribute_loss(const Tensor& attr_logits, const Tensor& attr_targets);

struct LossWeights {
  double lambda_cls = 1.0;
  double lambda_mask = 1.0;
  double lambda_attr = 1.0;
};

// Deep-supervised total: every stage is matched independently and its class,
// mask (focal + dice over matched masks, supervised at full ground-truth
// resolution) and attribute losses are composed with the lambda weights.
LossReport total_loss(const std::vector<StagePrediction>& stages,
                      const SceneAnnotation& gt,
                      const std::vector<Assignment>& assignments,
                      const LossWeights& weights = {});

}  // namespace lqseg
