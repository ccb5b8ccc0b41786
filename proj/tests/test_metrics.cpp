#include "doctest.h"

#include <cmath>

#include "lqseg/metrics.hpp"

using namespace lqseg;

namespace {

std::vector<std::uint8_t> box_mask(int size, int x0, int y0, int x1, int y1) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(size) * size, 0);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m[static_cast<std::size_t>(y) * size + x] = 1;
  return m;
}

SceneAnnotation one_instance_scene(int size, std::vector<std::uint8_t> mask,
                                   int class_id, std::vector<std::uint8_t> attrs) {
  SceneAnnotation ann;
  ann.height = size;
  ann.width = size;
  InstanceAnnotation inst;
  inst.class_id = class_id;
  inst.mask = std::move(mask);
  inst.attributes = std::move(attrs);
  ann.instances.push_back(std::move(inst));
  return ann;
}

Detection make_det(int class_id, double score, std::vector<std::uint8_t> mask,
                   std::vector<int> attrs = {}) {
  Detection d;
  d.class_id = class_id;
  d.score = score;
  d.mask = std::move(mask);
  d.attributes = std::move(attrs);
  return d;
}

}  // namespace

TEST_CASE("mask_iou identities") {
  auto a = box_mask(8, 0, 0, 4, 4);
  CHECK(mask_iou(a, a) == 1.0);
  auto b = box_mask(8, 4, 4, 8, 8);
  CHECK(mask_iou(a, b) == 0.0);
  // half-overlapping equal-area boxes: |I| = A/2... use explicit counts
  auto c = box_mask(8, 0, 0, 4, 4);       // area 16
  auto d = box_mask(8, 2, 0, 6, 4);       // area 16, overlap 8
  CHECK(mask_iou(c, d) == doctest::Approx(8.0 / 24.0));
  // empty conventions
  std::vector<std::uint8_t> empty(64, 0);
  CHECK(mask_iou(empty, empty) == 1.0);
  CHECK(mask_iou(empty, a) == 0.0);
  CHECK_THROWS_AS(mask_iou(box_mask(4, 0, 0, 1, 1), box_mask(8, 0, 0, 1, 1)), ShapeError);
}

TEST_CASE("attribute_f1 identities") {
  CHECK(attribute_f1({1, 3}, {1, 3}) == 1.0);
  CHECK(attribute_f1({0, 1}, {1, 2}) == doctest::Approx(0.5));
  CHECK(attribute_f1({}, {3}) == 0.0);
  CHECK(attribute_f1({3}, {}) == 0.0);
  CHECK(attribute_f1({}, {}) == 1.0);
  CHECK(attribute_f1({0}, {1}) == 0.0);
}

TEST_CASE("perfect detector scores AP one") {
  auto gt_mask = box_mask(16, 2, 2, 10, 10);
  std::vector<SceneAnnotation> gts = {
      one_instance_scene(16, gt_mask, 1, {1, 0, 0, 1, 0, 1, 0, 0, 0})};
  std::vector<std::vector<Detection>> dets = {{make_det(1, 0.9, gt_mask)}};
  CHECK(ap_iou(dets, gts) == doctest::Approx(1.0));
}

TEST_CASE("no detections scores AP zero") {
  std::vector<SceneAnnotation> gts = {
      one_instance_scene(16, box_mask(16, 0, 0, 8, 8), 0, {1, 0, 0, 1, 0, 1, 0, 0, 0})};
  std::vector<std::vector<Detection>> dets = {{}};
  CHECK(ap_iou(dets, gts) == 0.0);
}

TEST_CASE("high-scored false positive reproduces the hand PR curve") {
  // 2 gts, 2 detections; the higher-scored detection misses both.
  auto g1 = box_mask(16, 0, 0, 6, 6);
  auto g2 = box_mask(16, 8, 8, 14, 14);
  SceneAnnotation ann;
  ann.height = 16;
  ann.width = 16;
  for (auto* m : {&g1, &g2}) {
    InstanceAnnotation inst;
    inst.class_id = 2;
    inst.mask = *m;
    inst.attributes = {1, 0, 0, 1, 0, 1, 0, 0, 0};
    ann.instances.push_back(inst);
  }
  std::vector<SceneAnnotation> gts = {ann};
  std::vector<std::vector<Detection>> dets = {{
      make_det(2, 0.9, box_mask(16, 0, 8, 4, 12)),  // false positive
      make_det(2, 0.5, g1),                         // true positive
  }};
  // PR points: (r=0, p=0) then (r=0.5, p=0.5).
  // 101-pt: max precision at recall >= r is 0.5 for r in [0, 0.5], else 0.
  const double expected = 51.0 / 101.0 * 0.5;
  CHECK(ap_iou(dets, gts) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("joint metric gates on attribute F1") {
  auto gt_mask = box_mask(16, 2, 2, 10, 10);
  std::vector<SceneAnnotation> gts = {
      one_instance_scene(16, gt_mask, 1, {1, 0, 0, 0, 1, 0, 1, 0, 0})};
  // perfect mask + perfect attributes
  std::vector<std::vector<Detection>> good = {{make_det(1, 0.9, gt_mask, {0, 4, 6})}};
  CHECK(ap_iou_f1(good, gts) == doctest::Approx(1.0));
  // perfect mask + fully wrong attributes
  std::vector<std::vector<Detection>> bad = {{make_det(1, 0.9, gt_mask, {1, 3, 5})}};
  CHECK(ap_iou_f1(bad, gts) == 0.0);
}

TEST_CASE("ap_iou_f1 never exceeds ap_iou on random detection sets") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int size = 16;
    std::vector<SceneAnnotation> gts;
    std::vector<std::vector<Detection>> dets;
    const int n_img = 1 + static_cast<int>(rng.uniform_int(3));
    for (int img = 0; img < n_img; ++img) {
      SceneAnnotation ann;
      ann.height = size;
      ann.width = size;
      const int n_inst = 1 + static_cast<int>(rng.uniform_int(3));
      for (int i = 0; i < n_inst; ++i) {
        InstanceAnnotation inst;
        inst.class_id = static_cast<int>(rng.uniform_int(3));
        const int x0 = static_cast<int>(rng.uniform_int(8)), y0 = static_cast<int>(rng.uniform_int(8));
        inst.mask = box_mask(size, x0, y0, x0 + 4 + static_cast<int>(rng.uniform_int(4)),
                             y0 + 4 + static_cast<int>(rng.uniform_int(4)));
        inst.attributes.assign(9, 0);
        for (int a = 0; a < 9; ++a) inst.attributes[static_cast<std::size_t>(a)] = rng.uniform() < 0.3;
        ann.instances.push_back(inst);
      }
      gts.push_back(ann);
      std::vector<Detection> img_dets;
      const int n_det = static_cast<int>(rng.uniform_int(4));
      for (int d = 0; d < n_det; ++d) {
        const int x0 = static_cast<int>(rng.uniform_int(8)), y0 = static_cast<int>(rng.uniform_int(8));
        std::vector<int> attrs;
        for (int a = 0; a < 9; ++a)
          if (rng.uniform() < 0.3) attrs.push_back(a);
        img_dets.push_back(make_det(static_cast<int>(rng.uniform_int(3)), rng.uniform(),
                                    box_mask(size, x0, y0, x0 + 4 + static_cast<int>(rng.uniform_int(4)),
                                             y0 + 4 + static_cast<int>(rng.uniform_int(4))),
                                    attrs));
      }
      dets.push_back(img_dets);
    }
    CHECK(ap_iou_f1(dets, gts) <= ap_iou(dets, gts) + 1e-12);
  }
}

TEST_CASE("AP is invariant to rank-preserving score rescaling") {
  Rng rng(47);
  auto gt_mask = box_mask(16, 2, 2, 10, 10);
  auto other = box_mask(16, 9, 9, 15, 15);
  std::vector<SceneAnnotation> gts;
  {
    SceneAnnotation ann;
    ann.height = 16;
    ann.width = 16;
    for (auto* m : {&gt_mask, &other}) {
      InstanceAnnotation inst;
      inst.class_id = 0;
      inst.mask = *m;
      inst.attributes = {1, 0, 0, 1, 0, 1, 0, 0, 0};
      ann.instances.push_back(inst);
    }
    gts.push_back(ann);
  }
  std::vector<std::vector<Detection>> dets = {{
      make_det(0, 0.8, gt_mask),
      make_det(0, 0.4, box_mask(16, 0, 0, 3, 3)),
      make_det(0, 0.6, other),
  }};
  const double base = ap_iou(dets, gts);
  for (auto& d : dets[0]) d.score = 0.05 + d.score * 0.5;  // monotone rescale
  CHECK(ap_iou(dets, gts) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("duplicate detections of one gt count as false positives") {
  auto gt_mask = box_mask(16, 2, 2, 10, 10);
  std::vector<SceneAnnotation> gts = {
      one_instance_scene(16, gt_mask, 1, {1, 0, 0, 1, 0, 1, 0, 0, 0})};
  std::vector<std::vector<Detection>> dets = {{
      make_det(1, 0.9, gt_mask),
      make_det(1, 0.8, gt_mask),  // duplicate: gt already matched
  }};
  // PR: (1, 1) then the duplicate is FP at recall 1; interpolated AP stays 1.
  CHECK(ap_iou(dets, gts) == doctest::Approx(1.0));
  // Now the higher-scored detection is imperfect (IoU = 56/72 ~ 0.78): at
  // t <= 0.75 it claims the gt and the perfect one becomes the duplicate FP
  // (AP 1); at t >= 0.80 it is an FP ahead of the TP (AP 0.5 per the
  // false-positive-first curve). Mean over the 10 thresholds: 0.8.
  dets[0][0].mask = box_mask(16, 3, 2, 11, 10);
  CHECK(ap_iou(dets, gts) == doctest::Approx((6.0 * 1.0 + 4.0 * 0.5) / 10.0).epsilon(1e-12));
}

TEST_CASE("detections_from_prediction thresholds and drops no-object queries") {
  StagePrediction pred;
  // 2 queries, 3 classes total (2 + no-object), 2x2 masks, 3 attrs
  pred.class_logits = Tensor::from_data({2, 3}, {3.0, 1.0, 0.0,   // argmax class 0
                                                 0.0, 1.0, 4.0}); // argmax no-object
  pred.attr_logits = Tensor::from_data({2, 3}, {2.0, -2.0, 0.5, 0.0, 0.0, 0.0});
  pred.mask_logits = Tensor::from_data({2, 2, 2}, {5, -5, 5, -5, 1, 1, 1, 1});
  auto dets = detections_from_prediction(pred, 4, 4);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].class_id == 0);
  CHECK(dets[0].score == doctest::Approx(std::exp(3.0) / (std::exp(3.0) + std::exp(1.0) + 1.0)));
  CHECK(dets[0].attributes == std::vector<int>{0, 2});
  // left half of the upsampled mask is positive
  CHECK(dets[0].mask[0] == 1);
  CHECK(dets[0].mask[3] == 0);
}

TEST_CASE("eval report JSON carries the headline fields") {
  auto gt_mask = box_mask(8, 1, 1, 6, 6);
  std::vector<SceneAnnotation> gts = {
      one_instance_scene(8, gt_mask, 0, {1, 0, 0, 1, 0, 1, 0, 0, 0})};
  std::vector<std::vector<Detection>> dets = {{make_det(0, 0.9, gt_mask, {0, 3, 5})}};
  EvalReport rep = evaluate_detections(dets, gts);
  const std::string json = eval_report_json(rep);
  CHECK(json.find("ap_iou") != std::string::npos);
  CHECK(json.find("ap_iou_f1") != std::string::npos);
  CHECK(json.find("n_images") != std::string::npos);
  CHECK(rep.ap_iou_f1 <= rep.ap_iou + 1e-12);
}
