#pragma once

// Grid decoding and suppression. A raw grid is an S x S x (B*5 + C) slab in
// row-major (i, j, channel) order: per predictor b the channels are
// [x, y, w, h, conf_logit] with x,y,w,h already squashed to [0,1] by the
// detect head, followed by C shared class logits per cell.

#include <span>
#include <vector>

namespace gridsight {

struct BBox {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;  // image-normalized, center format
  int class_id = 0;
  double score = 0.0;
};

// Intersection area over union area; 0 when the union is empty.
double iou(const BBox& a, const BBox& b);

// Class-specific confidence: P(class|object) * confidence.
double class_score(double p_class_given_obj, double confidence);

// One box per (cell, predictor) whose argmax-class score clears the
// threshold. Boxes are clipped to the unit square; degenerate results are
// dropped.
std::vector<BBox> decode_grid(std::span<const double> raw, int S, int B, int C,
                              double conf_thresh);

// Greedy suppression: score-descending (ties: smaller class id, then input
// order); a box survives iff its IoU with every kept box (same class when
// class_aware) stays below iou_thresh.
std::vector<BBox> nms(const std::vector<BBox>& boxes, double iou_thresh, bool class_aware);

}  // namespace gridsight
