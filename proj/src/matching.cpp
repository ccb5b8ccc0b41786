#include "lqseg/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lqseg/errors.hpp"

namespace lqseg {

namespace {

// Focal terms use the training defaults; matching and loss stay consistent.
constexpr double kFocalAlpha = 0.25;
constexpr double kFocalGamma = 2.0;

double focal_cell(double logit, double target) {
  const double s_pos = stable_sigmoid(logit);
  const double s_neg = stable_sigmoid(-logit);
  const double pt = target > 0.5 ? s_pos : s_neg;
  const double q = target > 0.5 ? s_neg : s_pos;
  const double at = target > 0.5 ? kFocalAlpha : 1.0 - kFocalAlpha;
  const double lp = std::log(std::max(pt, 1e-12));
  return -at * q * q * lp;
}

double bce_cell(double logit, double target) {
  // stable: max(l,0) - l*t + log(1 + exp(-|l|))
  return std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

// JV-style shortest augmenting path assignment. rows = ground truths (all
// must be assigned), cols = queries. Returns minimal total cost and fills
// col_of_row. Requires rows <= cols and finite costs.
double solve_assignment(const std::vector<double>& cost, int rows, int cols,
                        std::vector<int>& col_of_row) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(rows) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(cols) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(cols) + 1, 0);   // row matched to col
  std::vector<int> way(static_cast<std::size_t>(cols) + 1, 0);
  for (int i = 1; i <= rows; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(cols) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(cols) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= cols; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1) * cols + (j - 1)] -
                           u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  col_of_row.assign(static_cast<std::size_t>(rows), -1);
  double total = 0.0;
  for (int j = 1; j <= cols; ++j)
    if (p[static_cast<std::size_t>(j)] != 0) {
      col_of_row[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
      total += cost[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1) * cols + (j - 1)];
    }
  return total;
}

}  // namespace

CostMatrix cost_matrix(const StagePrediction& pred, const SceneAnnotation& gt,
                       const MatchWeights& weights) {
  const int n_q = pred.mask_logits.dim(0);
  const int mh = pred.mask_logits.dim(1), mw = pred.mask_logits.dim(2);
  const int n_gt = static_cast<int>(gt.instances.size());
  const int k_classes = pred.class_logits.dim(1);
  const int k_attr = pred.attr_logits.dim(1);

  // class probabilities per query (plain doubles; matching is not differentiated)
  std::vector<double> probs(static_cast<std::size_t>(n_q) * k_classes);
  for (int q = 0; q < n_q; ++q) {
    const double* row = pred.class_logits.data() + static_cast<std::size_t>(q) * k_classes;
    double mx = row[0];
    for (int c = 1; c < k_classes; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < k_classes; ++c) {
      probs[static_cast<std::size_t>(q) * k_classes + c] = std::exp(row[c] - mx);
      denom += probs[static_cast<std::size_t>(q) * k_classes + c];
    }
    for (int c = 0; c < k_classes; ++c)
      probs[static_cast<std::size_t>(q) * k_classes + c] /= denom;
  }

  // ground-truth masks at mask-logit resolution
  std::vector<std::vector<std::uint8_t>> gt_small;
  gt_small.reserve(static_cast<std::size_t>(n_gt));
  for (const InstanceAnnotation& inst : gt.instances)
    gt_small.push_back(resize_mask_nearest(inst.mask, gt.height, gt.width, mh, mw));

  CostMatrix cm;
  cm.n_q = n_q;
  cm.n_gt = n_gt;
  cm.values.resize(static_cast<std::size_t>(n_q) * n_gt);
  cm.components.resize(cm.values.size());
  const int hw = mh * mw;
  for (int q = 0; q < n_q; ++q) {
    const double* mrow = pred.mask_logits.data() + static_cast<std::size_t>(q) * hw;
    const double* arow = pred.attr_logits.data() + static_cast<std::size_t>(q) * k_attr;
    for (int g = 0; g < n_gt; ++g) {
      CostComponents comp;
      comp.cls = -probs[static_cast<std::size_t>(q) * k_classes + gt.instances[static_cast<std::size_t>(g)].class_id];

      double focal = 0.0, inter = 0.0, psum = 0.0, gsum = 0.0;
      const auto& gm = gt_small[static_cast<std::size_t>(g)];
      for (int p = 0; p < hw; ++p) {
        const double target = gm[static_cast<std::size_t>(p)];
        focal += focal_cell(mrow[p], target);
        const double prob = stable_sigmoid(mrow[p]);
        inter += prob * target;
        psum += prob;
        gsum += target;
      }
      focal /= hw;
      const double dice = 1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0);
      comp.mask = focal + dice;

      double bce = 0.0;
      const auto& attrs = gt.instances[static_cast<std::size_t>(g)].attributes;
      for (int a = 0; a < k_attr; ++a) bce += bce_cell(arow[a], attrs[static_cast<std::size_t>(a)]);
      comp.attr = bce / k_attr;

      const std::size_t idx = static_cast<std::size_t>(q) * n_gt + g;
      cm.components[idx] = comp;
      cm.values[idx] = weights.lambda_cls * comp.cls + weights.lambda_mask * comp.mask +
                       weights.lambda_attr * comp.attr;
    }
  }
  return cm;
}

Assignment hungarian(const CostMatrix& costs) {
  if (costs.n_gt > costs.n_q)
    throw ContractError("hungarian: " + std::to_string(costs.n_gt) +
                        " ground truths exceed " + std::to_string(costs.n_q) + " queries");
  Assignment out;
  if (costs.n_gt == 0) return out;
  for (double v : costs.values)
    if (!std::isfinite(v)) throw ContractError("hungarian: non-finite cost cell");

  // transpose to rows = gt, cols = queries
  std::vector<double> cost(static_cast<std::size_t>(costs.n_gt) * costs.n_q);
  for (int q = 0; q < costs.n_q; ++q)
    for (int g = 0; g < costs.n_gt; ++g)
      cost[static_cast<std::size_t>(g) * costs.n_q + q] = costs.at(q, g);

  std::vector<int> col_of_row;
  const double optimal = solve_assignment(cost, costs.n_gt, costs.n_q, col_of_row);
  const double tol = 1e-9 * (1.0 + std::abs(optimal));

  // Fix pairs in (query, gt) rank order while an optimal completion exists,
  // which yields the lexicographically smallest optimal assignment.
  std::vector<char> gt_fixed(static_cast<std::size_t>(costs.n_gt), 0);
  std::vector<char> q_used(static_cast<std::size_t>(costs.n_q), 0);
  double fixed_cost = 0.0;
  int fixed_count = 0;
  for (int q = 0; q < costs.n_q && fixed_count < costs.n_gt; ++q) {
    if (q_used[static_cast<std::size_t>(q)]) continue;
    for (int g = 0; g < costs.n_gt; ++g) {
      if (gt_fixed[static_cast<std::size_t>(g)]) continue;
      // candidate total with (q,g) forced: fixed + cell + best of the rest
      std::vector<int> rows_left, cols_left;
      for (int g2 = 0; g2 < costs.n_gt; ++g2)
        if (!gt_fixed[static_cast<std::size_t>(g2)] && g2 != g) rows_left.push_back(g2);
      for (int q2 = 0; q2 < costs.n_q; ++q2)
        if (!q_used[static_cast<std::size_t>(q2)] && q2 != q) cols_left.push_back(q2);
      double rest = 0.0;
      if (!rows_left.empty()) {
        std::vector<double> sub(rows_left.size() * cols_left.size());
        for (std::size_t r = 0; r < rows_left.size(); ++r)
          for (std::size_t c = 0; c < cols_left.size(); ++c)
            sub[r * cols_left.size() + c] = costs.at(cols_left[c], rows_left[r]);
        std::vector<int> dummy;
        rest = solve_assignment(sub, static_cast<int>(rows_left.size()),
                                static_cast<int>(cols_left.size()), dummy);
      }
      const double candidate = fixed_cost + costs.at(q, g) + rest;
      if (candidate <= optimal + tol) {
        out.pairs.emplace_back(q, g);
        gt_fixed[static_cast<std::size_t>(g)] = 1;
        q_used[static_cast<std::size_t>(q)] = 1;
        fixed_cost += costs.at(q, g);
        ++fixed_count;
        break;  // this query is taken; move to the next one
      }
    }
  }
  out.total_cost = fixed_cost;
  return out;
}

}  // namespace lqseg
