#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lqseg/decoder.hpp"
#include "lqseg/synthdata.hpp"

namespace lqseg {

struct Detection {
  int class_id = 0;
  double score = 0.0;                 // probability of the argmax class
  std::vector<std::uint8_t> mask;     // binary, image resolution
  std::vector<int> attributes;        // sorted attribute ids with sigmoid > 0.5
};

struct EvalReport {
  double ap_iou = 0.0;
  double ap_iou_f1 = 0.0;
  std::vector<std::pair<int, double>> per_class_ap_iou;
  std::vector<std::pair<int, double>> per_class_ap_iou_f1;
  std::vector<double> thresholds;
  int n_images = 0;
};

// |a and b| / |a or b|; both empty -> 1 (vacuous agreement), one empty -> 0.
double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

// Set F1 over attribute ids; both empty -> 1, exactly one empty -> 0.
double attribute_f1(const std::vector<int>& pred, const std::vector<int>& gt);

// decides TP for (detection, gt instance) at threshold t
using TpPredicate =
    std::function<bool(const Detection&, const InstanceAnnotation&, double)>;

// COCO-style AP: score-descending greedy per-image matching (each gt used at
// most once, best-IoU candidate wins), 101-point interpolation, averaged over
// thresholds {0.50..0.95} and over classes present in the ground truth.
double average_precision(const std::vector<std::vector<Detection>>& detections,
                         const std::vector<SceneAnnotation>& gts,
                         const TpPredicate& predicate,
                         std::vector<std::pair<int, double>>* per_class = nullptr);

double ap_iou(const std::vector<std::vector<Detection>>& detections,
              const std::vector<SceneAnnotation>& gts,
              std::vector<std::pair<int, double>>* per_class = nullptr);

// Same sweep with the predicate strengthened by attribute F1 >= t. A fixed
// F1 threshold (>= 0) replaces the swept t for sensitivity runs.
double ap_iou_f1(const std::vector<std::vector<Detection>>& detections,
                 const std::vector<SceneAnnotation>& gts,
                 double fixed_f1_threshold = -1.0,
                 std::vector<std::pair<int, double>>* per_class = nullptr);

// Thresholds swept by the evaluation (0.50 step 0.05 through 0.95).
std::vector<double> iou_thresholds();

// Turns the final-stage prediction into detections at image resolution:
// mask logits are bilinearly upsampled and thresholded at 0; queries whose
// argmax class is "no object" emit nothing.
std::vector<Detection> detections_from_prediction(const StagePrediction& pred,
                                                  int image_h, int image_w);

EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& detections,
                               const std::vector<SceneAnnotation>& gts,
                               double fixed_f1_threshold = -1.0);

std::string eval_report_json(const EvalReport& report);

}  // namespace lqseg
