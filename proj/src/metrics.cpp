#include "lqseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"
#include "lqseg/errors.hpp"

namespace lqseg {

double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size())
    throw ShapeError("mask_iou: mask sizes differ (" + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()) + ")");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool av = a[i] != 0, bv = b[i] != 0;
    inter += av && bv;
    uni += av || bv;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double attribute_f1(const std::vector<int>& pred, const std::vector<int>& gt) {
  if (pred.empty() && gt.empty()) return 1.0;
  if (pred.empty() || gt.empty()) return 0.0;
  std::set<int> ps(pred.begin(), pred.end()), gs(gt.begin(), gt.end());
  std::size_t tp = 0;
  for (int v : ps) tp += gs.count(v);
  if (tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(ps.size());
  const double recall = static_cast<double>(tp) / static_cast<double>(gs.size());
  return 2.0 * precision * recall / (precision + recall);
}

std::vector<double> iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
  return t;
}

namespace {

struct ScoredDetection {
  double score;
  int image;
  int index;  // within the image's detection list
};

// AP for one class at one threshold: greedy matching + 101-point interpolation.
double ap_single(const std::vector<std::vector<Detection>>& detections,
                 const std::vector<SceneAnnotation>& gts, int class_id, double t,
                 const TpPredicate& predicate) {
  int n_gt = 0;
  for (const SceneAnnotation& ann : gts)
    for (const InstanceAnnotation& inst : ann.instances)
      if (inst.class_id == class_id) ++n_gt;
  if (n_gt == 0) return 0.0;

  std::vector<ScoredDetection> all;
  for (std::size_t img = 0; img < detections.size(); ++img)
    for (std::size_t d = 0; d < detections[img].size(); ++d)
      if (detections[img][d].class_id == class_id)
        all.push_back({detections[img][d].score, static_cast<int>(img), static_cast<int>(d)});
  // stable deterministic order: score desc, then image, then index
  std::sort(all.begin(), all.end(), [](const ScoredDetection& a, const ScoredDetection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.index < b.index;
  });

  std::vector<std::vector<char>> gt_used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i)
    gt_used[i].assign(gts[i].instances.size(), 0);

  std::vector<char> is_tp(all.size(), 0);
  for (std::size_t k = 0; k < all.size(); ++k) {
    const Detection& det = detections[static_cast<std::size_t>(all[k].image)]
                                     [static_cast<std::size_t>(all[k].index)];
    const SceneAnnotation& ann = gts[static_cast<std::size_t>(all[k].image)];
    int best_g = -1;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < ann.instances.size(); ++g) {
      if (gt_used[static_cast<std::size_t>(all[k].image)][g]) continue;
      if (ann.instances[g].class_id != class_id) continue;
      if (!predicate(det, ann.instances[g], t)) continue;
      const double iou = mask_iou(det.mask, ann.instances[g].mask);
      if (iou > best_iou) {
        best_iou = iou;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      is_tp[k] = 1;
      gt_used[static_cast<std::size_t>(all[k].image)][static_cast<std::size_t>(best_g)] = 1;
    }
  }

  // precision-recall points in score order
  std::vector<double> precision(all.size()), recall(all.size());
  int tp = 0, fp = 0;
  for (std::size_t k = 0; k < all.size(); ++k) {
    if (is_tp[k]) ++tp; else ++fp;
    precision[k] = static_cast<double>(tp) / static_cast<double>(tp + fp);
    recall[k] = static_cast<double>(tp) / static_cast<double>(n_gt);
  }

  // 101-point interpolated AP: mean over r of max precision at recall >= r
  double ap = 0.0;
  for (int ri = 0; ri <= 100; ++ri) {
    const double r = ri / 100.0;
    double best = 0.0;
    for (std::size_t k = 0; k < all.size(); ++k)
      if (recall[k] >= r - 1e-12) best = std::max(best, precision[k]);
    ap += best;
  }
  return ap / 101.0;
}

}  // namespace

double average_precision(const std::vector<std::vector<Detection>>& detections,
                         const std::vector<SceneAnnotation>& gts,
                         const TpPredicate& predicate,
                         std::vector<std::pair<int, double>>* per_class) {
  std::set<int> classes;
  for (const SceneAnnotation& ann : gts)
    for (const InstanceAnnotation& inst : ann.instances) classes.insert(inst.class_id);
  if (classes.empty()) return 0.0;

  const std::vector<double> thresholds = iou_thresholds();
  double total = 0.0;
  for (int c : classes) {
    double class_ap = 0.0;
    for (double t : thresholds) class_ap += ap_single(detections, gts, c, t, predicate);
    class_ap /= static_cast<double>(thresholds.size());
    if (per_class) per_class->emplace_back(c, class_ap);
    total += class_ap;
  }
  return total / static_cast<double>(classes.size());
}

double ap_iou(const std::vector<std::vector<Detection>>& detections,
              const std::vector<SceneAnnotation>& gts,
              std::vector<std::pair<int, double>>* per_class) {
  return average_precision(
      detections, gts,
      [](const Detection& det, const InstanceAnnotation& inst, double t) {
        return mask_iou(det.mask, inst.mask) >= t;
      },
      per_class);
}

double ap_iou_f1(const std::vector<std::vector<Detection>>& detections,
                 const std::vector<SceneAnnotation>& gts, double fixed_f1_threshold,
                 std::vector<std::pair<int, double>>* per_class) {
  return average_precision(
      detections, gts,
      [fixed_f1_threshold](const Detection& det, const InstanceAnnotation& inst,
                           double t) {
        if (mask_iou(det.mask, inst.mask) < t) return false;
        std::vector<int> gt_ids;
        for (std::size_t a = 0; a < inst.attributes.size(); ++a)
          if (inst.attributes[a]) gt_ids.push_back(static_cast<int>(a));
        const double f1 = attribute_f1(det.attributes, gt_ids);
        return f1 >= (fixed_f1_threshold >= 0.0 ? fixed_f1_threshold : t);
      },
      per_class);
}

std::vector<Detection> detections_from_prediction(const StagePrediction& pred,
                                                  int image_h, int image_w) {
  const int n_q = pred.class_logits.dim(0);
  const int k_classes = pred.class_logits.dim(1);
  const int k_attr = pred.attr_logits.dim(1);
  NoGradGuard guard;
  Tensor up = resize_bilinear(pred.mask_logits, image_h, image_w);

  std::vector<Detection> out;
  const std::size_t hw = static_cast<std::size_t>(image_h) * image_w;
  for (int q = 0; q < n_q; ++q) {
    const double* row = pred.class_logits.data() + static_cast<std::size_t>(q) * k_classes;
    int arg = 0;
    for (int c = 1; c < k_classes; ++c)
      if (row[c] > row[arg]) arg = c;
    if (arg == k_classes - 1) continue;  // "no object"

    double mx = row[0];
    for (int c = 1; c < k_classes; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < k_classes; ++c) denom += std::exp(row[c] - mx);

    Detection det;
    det.class_id = arg;
    det.score = std::exp(row[arg] - mx) / denom;
    det.mask.assign(hw, 0);
    const double* mrow = up.data() + static_cast<std::size_t>(q) * hw;
    for (std::size_t p = 0; p < hw; ++p) det.mask[p] = mrow[p] > 0.0 ? 1 : 0;
    const double* arow = pred.attr_logits.data() + static_cast<std::size_t>(q) * k_attr;
    for (int a = 0; a < k_attr; ++a)
      if (arow[a] > 0.0) det.attributes.push_back(a);
    out.push_back(std::move(det));
  }
  return out;
}

EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& detections,
                               const std::vector<SceneAnnotation>& gts,
                               double fixed_f1_threshold) {
  EvalReport report;
  report.n_images = static_cast<int>(gts.size());
  report.thresholds = iou_thresholds();
  report.ap_iou = ap_iou(detections, gts, &report.per_class_ap_iou);
  report.ap_iou_f1 =
      ap_iou_f1(detections, gts, fixed_f1_threshold, &report.per_class_ap_iou_f1);
  return report;
}

std::string eval_report_json(const EvalReport& report) {
  nlohmann::json j;
  j["ap_iou"] = report.ap_iou;
  j["ap_iou_f1"] = report.ap_iou_f1;
  nlohmann::json per_class;
  for (const auto& [c, v] : report.per_class_ap_iou)
    per_class["class_" + std::to_string(c)]["ap_iou"] = v;
  for (const auto& [c, v] : report.per_class_ap_iou_f1)
    per_class["class_" + std::to_string(c)]["ap_iou_f1"] = v;
  j["per_class"] = per_class;
  j["thresholds"] = report.thresholds;
  j["n_images"] = report.n_images;
  return j.dump(2);
}

}  // namespace lqseg
