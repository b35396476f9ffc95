#pragma once

// Detection-to-truth matching, precision/recall, interpolated AP, and the
// evaluation report. Detections and ground truths are per-image lists; a
// ground truth is a BBox whose score is ignored.

#include <cstdint>
#include <vector>

#include "gridsight/boxes.hpp"

namespace gridsight {

struct MatchRecord {
  int image_id = 0;
  BBox det;
  bool is_tp = false;
  int matched_gt = -1;  // index into the image's ground-truth list
};

struct MatchResult {
  std::vector<MatchRecord> records;
  int64_t fn = 0;  // unmatched ground truths
};

struct ClassEval {
  int class_id = 0;
  int64_t n_gt = 0;
  int64_t tp = 0, fp = 0, fn = 0;  // at the report's confidence threshold, IoU 0.5
  double precision = 0.0, recall = 0.0;
  double ap50 = 0.0, ap50_95 = 0.0;
};

struct EvalReport {
  std::vector<ClassEval> per_class;
  double map50 = 0.0, map50_95 = 0.0;
  // aggregate P/R at the F1-maximizing confidence threshold (IoU 0.5)
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  double conf_threshold = 0.0;
  int64_t total_gt = 0, total_det = 0;
};

// tp/(tp+fp); 0 when there were no detections.
double precision_metric(int64_t tp, int64_t fp);

// tp/(tp+fn); 1 when there was nothing to find.
double recall_metric(int64_t tp, int64_t fn);

// Greedy per-image, per-class matching in descending score order. A
// detection is a TP iff its best IoU over the image's unmatched same-class
// ground truths reaches iou_thresh; each ground truth matches at most once.
MatchResult match_detections(const std::vector<std::vector<BBox>>& dets,
                             const std::vector<std::vector<BBox>>& gts, double iou_thresh,
                             int num_classes);

// 101-point interpolated AP. Records may arrive unsorted; ties keep input
// order. Returns 0 when n_gt == 0.
double average_precision(std::vector<MatchRecord> records, int64_t n_gt);

// Class-mean AP at one IoU threshold over classes with at least one truth.
double map_at(const std::vector<std::vector<BBox>>& dets,
              const std::vector<std::vector<BBox>>& gts, double iou_thresh, int num_classes);

// Mean of map_at over IoU 0.50, 0.55, ..., 0.95.
double map_range(const std::vector<std::vector<BBox>>& dets,
                 const std::vector<std::vector<BBox>>& gts, int num_classes);

EvalReport evaluate_detections(const std::vector<std::vector<BBox>>& dets,
                               const std::vector<std::vector<BBox>>& gts, int num_classes);

}  // namespace gridsight
