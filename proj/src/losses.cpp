#include "lqseg/losses.hpp"

#include <algorithm>
#include <cmath>

#include "lqseg/errors.hpp"

namespace lqseg {

namespace {

constexpr double kLogFloor = 1e-12;

void check_binary(const Tensor& targets, const char* op) {
  for (std::int64_t i = 0; i < targets.numel(); ++i) {
    const double v = targets.data()[i];
    if (v != 0.0 && v != 1.0)
      throw ContractError(std::string(op) + ": targets must be exactly 0 or 1");
  }
}

// (1 - t) as a constant companion of a 0/1 tensor
Tensor complement_const(const Tensor& t01) {
  std::vector<double> d(t01.values());
  for (double& v : d) v = 1.0 - v;
  return Tensor::from_data(t01.shape(), std::move(d));
}

}  // namespace

Tensor focal_loss(const Tensor& logits, const Tensor& targets, double alpha,
                  double gamma) {
  if (logits.shape() != targets.shape())
    throw ShapeError("focal_loss: shape mismatch " + shape_str(logits.shape()) + " vs " +
                     shape_str(targets.shape()));
  check_binary(targets, "focal_loss");

  // Fused evaluation of mean(-alpha_t (1-p_t)^gamma log(p_t)); the mask term
  // runs over full-resolution masks every stage, so one pass matters.
  const std::int64_t n = logits.numel();
  std::vector<double> pt(static_cast<std::size_t>(n));
  std::vector<double> one_minus_pt(static_cast<std::size_t>(n));
  std::vector<double> dpt_dl(static_cast<std::size_t>(n));
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    // 1 - sigmoid(l) == sigmoid(-l); evaluating both sides directly keeps
    // full relative precision in the saturated tails.
    const double s_pos = stable_sigmoid(logits.data()[i]);
    const double s_neg = stable_sigmoid(-logits.data()[i]);
    const bool positive = targets.data()[i] > 0.5;
    const double ptv = positive ? s_pos : s_neg;
    const double q = positive ? s_neg : s_pos;
    pt[static_cast<std::size_t>(i)] = ptv;
    one_minus_pt[static_cast<std::size_t>(i)] = q;
    dpt_dl[static_cast<std::size_t>(i)] = (positive ? 1.0 : -1.0) * s_pos * s_neg;
    const double at = positive ? alpha : 1.0 - alpha;
    const double mod = gamma == 2.0 ? q * q : (gamma == 0.0 ? 1.0 : std::pow(q, gamma));
    acc -= at * mod * std::log(std::max(ptv, kLogFloor));
  }
  const double value = acc / static_cast<double>(n);

  bool rg = Graph::current().recording() && logits.requires_grad();
  Tensor out = Tensor::from_data({}, {value}, rg);
  if (rg) {
    Graph::current().record(
        {out.impl(),
         {logits.impl()},
         [li = logits.impl(), ti = targets.impl(), pt = std::move(pt),
          one_minus_pt = std::move(one_minus_pt), dpt_dl = std::move(dpt_dl), alpha,
          gamma, n](const TensorImpl& o) {
           const double g = o.grad[0] / static_cast<double>(n);
           for (std::int64_t i = 0; i < n; ++i) {
             const bool positive = ti->data[static_cast<std::size_t>(i)] > 0.5;
             const double at = positive ? alpha : 1.0 - alpha;
             const double ptv = pt[static_cast<std::size_t>(i)];
             const double q = one_minus_pt[static_cast<std::size_t>(i)];
             const double logp = std::log(std::max(ptv, kLogFloor));
             double dcell_dpt = 0.0;
             if (gamma == 2.0)
               dcell_dpt = at * 2.0 * q * logp;
             else if (gamma != 0.0)
               dcell_dpt = at * gamma * std::pow(q, gamma - 1.0) * logp;
             const double mod = gamma == 2.0 ? q * q : (gamma == 0.0 ? 1.0 : std::pow(q, gamma));
             if (ptv > kLogFloor) dcell_dpt -= at * mod / ptv;
             li->grad[static_cast<std::size_t>(i)] +=
                 g * dcell_dpt * dpt_dl[static_cast<std::size_t>(i)];
           }
         }});
  }
  return out;
}

Tensor dice_loss(const Tensor& mask_logits, const Tensor& gt_mask) {
  if (mask_logits.shape() != gt_mask.shape())
    throw ShapeError("dice_loss: shape mismatch " + shape_str(mask_logits.shape()) +
                     " vs " + shape_str(gt_mask.shape()));
  Tensor p = sigmoid(mask_logits);
  Tensor g = gt_mask.detach_copy();
  Tensor inter = sum(mul(p, g));
  Tensor numer = add_scalar(mul_scalar(inter, 2.0), 1.0);
  Tensor denom = add_scalar(add(sum(p), sum(g)), 1.0);
  return add_scalar(mul_scalar(mul(numer, reciprocal(denom)), -1.0), 1.0);
}

Tensor attribute_loss(const Tensor& attr_logits, const Tensor& attr_targets) {
  if (attr_logits.shape() != attr_targets.shape())
    throw ShapeError("attribute_loss: shape mismatch " + shape_str(attr_logits.shape()) +
                     " vs " + shape_str(attr_targets.shape()));
  check_binary(attr_targets, "attribute_loss");
  // -[t log sigmoid(l) + (1-t) log sigmoid(-l)]; the mirrored sigmoid keeps
  // precision where 1-p would cancel.
  Tensor t = attr_targets.detach_copy();
  Tensor not_t = complement_const(t);
  Tensor log_p = log_clamped(sigmoid(attr_logits), 1e-12);
  Tensor log_not_p = log_clamped(sigmoid(mul_scalar(attr_logits, -1.0)), 1e-12);
  Tensor cells = add(mul(t, log_p), mul(not_t, log_not_p));
  return mul_scalar(mean(cells), -1.0);
}

LossReport total_loss(const std::vector<StagePrediction>& stages,
                      const SceneAnnotation& gt,
                      const std::vector<Assignment>& assignments,
                      const LossWeights& weights) {
  if (stages.size() != 3 && stages.size() != 1)
    throw ContractError("total_loss: expected 3 stages (or the 1-stage ablation), got " +
                        std::to_string(stages.size()));
  if (assignments.size() != stages.size())
    throw ContractError("total_loss: one assignment per stage required");

  LossReport report;
  Tensor total;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const StagePrediction& pred = stages[s];
    const Assignment& assign = assignments[s];
    const int n_q = pred.class_logits.dim(0);
    const int k_classes = pred.class_logits.dim(1);
    const int k_attr = pred.attr_logits.dim(1);
    const int mh = pred.mask_logits.dim(1), mw = pred.mask_logits.dim(2);

    // class targets: matched queries carry their gt class, the rest "no object"
    Tensor cls_target = Tensor::zeros({n_q, k_classes});
    for (int q = 0; q < n_q; ++q)
      cls_target.data()[static_cast<std::size_t>(q) * k_classes + (k_classes - 1)] = 1.0;
    for (const auto& [q, g] : assign.pairs) {
      cls_target.data()[static_cast<std::size_t>(q) * k_classes + (k_classes - 1)] = 0.0;
      cls_target.data()[static_cast<std::size_t>(q) * k_classes +
                        gt.instances[static_cast<std::size_t>(g)].class_id] = 1.0;
    }
    Tensor cls = focal_loss(pred.class_logits, cls_target);

    Tensor mask_focal, mask_dice, attr;
    if (!assign.pairs.empty()) {
      std::vector<int> matched_q;
      matched_q.reserve(assign.pairs.size());
      std::vector<double> gt_masks;
      std::vector<double> gt_attrs;
      for (const auto& [q, g] : assign.pairs) {
        matched_q.push_back(q);
        const InstanceAnnotation& inst = gt.instances[static_cast<std::size_t>(g)];
        for (std::uint8_t v : inst.mask) gt_masks.push_back(v);
        for (std::uint8_t v : inst.attributes) gt_attrs.push_back(v);
      }
      const int n_m = static_cast<int>(assign.pairs.size());

      // Mask supervision at ground-truth resolution: upsample the matched
      // logits bilinearly so boundary detail is trainable below stride 4.
      Tensor matched_logits =
          take_rows(reshape(pred.mask_logits, {n_q, mh * mw}), matched_q);
      Tensor up = resize_bilinear(reshape(matched_logits, {n_m, mh, mw}), gt.height,
                                  gt.width);
      Tensor gt_mask_t = Tensor::from_data({n_m, gt.height, gt.width}, std::move(gt_masks));
      mask_focal = focal_loss(up, gt_mask_t);
      // dice per matched pair, averaged
      Tensor up_flat = reshape(up, {n_m, gt.height * gt.width});
      Tensor gt_flat = reshape(gt_mask_t, {n_m, gt.height * gt.width});
      for (int i = 0; i < n_m; ++i) {
        Tensor one = dice_loss(take_rows(up_flat, {i}), take_rows(gt_flat, {i}));
        mask_dice = mask_dice.defined() ? add(mask_dice, one) : one;
      }
      mask_dice = mul_scalar(mask_dice, 1.0 / n_m);

      Tensor matched_attr = take_rows(pred.attr_logits, matched_q);
      attr = attribute_loss(matched_attr,
                            Tensor::from_data({n_m, k_attr}, std::move(gt_attrs)));
    } else {
      mask_focal = Tensor::scalar(0.0);
      mask_dice = Tensor::scalar(0.0);
      attr = Tensor::scalar(0.0);
    }

    report.cls.push_back(cls.item());
    report.mask_focal.push_back(mask_focal.item());
    report.mask_dice.push_back(mask_dice.item());
    report.attr.push_back(attr.item());

    Tensor stage_total = add(add(mul_scalar(cls, weights.lambda_cls),
                                 mul_scalar(add(mask_focal, mask_dice), weights.lambda_mask)),
                             mul_scalar(attr, weights.lambda_attr));
    total = total.defined() ? add(total, stage_total) : stage_total;
  }
  report.total = total;
  report.total_value = total.item();
  return report;
}

}  // namespace lqseg
