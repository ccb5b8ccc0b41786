#pragma once

#include <utility>
#include <vector>

#include "lqseg/decoder.hpp"
#include "lqseg/synthdata.hpp"

namespace lqseg {

struct CostComponents {
  double cls = 0.0;
  double mask = 0.0;
  double attr = 0.0;
};

struct CostMatrix {
  int n_q = 0;
  int n_gt = 0;
  std::vector<double> values;             // n_q * n_gt, row-major
  std::vector<CostComponents> components; // same layout

  double at(int q, int g) const { return values[static_cast<std::size_t>(q) * n_gt + g]; }
};

struct Assignment {
  // (query_index, gt_index) pairs sorted by query index; exactly one pair per
  // ground-truth instance. Unmatched queries are implicitly "no object".
  std::vector<std::pair<int, int>> pairs;
  double total_cost = 0.0;
};

struct MatchWeights {
  double lambda_cls = 1.0;
  double lambda_mask = 1.0;
  double lambda_attr = 1.0;
};

// Combined class/mask/attribute matching cost. Ground-truth masks are
// nearest-neighbor downsampled to the mask-logit resolution.
CostMatrix cost_matrix(const StagePrediction& pred, const SceneAnnotation& gt,
                       const MatchWeights& weights = {});

// Minimum-total-cost injective assignment of every ground-truth column.
// Among cost-equal optima the lexicographically smallest pair list (ordered
// by query index, then gt index) is returned.
Assignment hungarian(const CostMatrix& costs);

}  // namespace lqseg
