#include "gridsight/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gridsight/tensor.hpp"

namespace gridsight {

double iou(const BBox& a, const BBox& b) {
  const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2;
  const double ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
  const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2;
  const double by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  const double iw = std::min(ax1, bx1) - std::max(ax0, bx0);
  const double ih = std::min(ay1, by1) - std::max(ay0, by0);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

double class_score(double p_class_given_obj, double confidence) {
  return p_class_given_obj * confidence;
}

std::vector<BBox> decode_grid(std::span<const double> raw, int S, int B, int C,
                              double conf_thresh) {
  const int D = B * 5 + C;
  if (S < 1 || B < 1 || C < 1 || int64_t(raw.size()) != int64_t(S) * S * D)
    throw input_error("decode_grid: raw size " + std::to_string(raw.size()) +
                      " does not match S*S*(B*5+C) = " + std::to_string(int64_t(S) * S * D));

  std::vector<BBox> out;
  std::vector<double> probs(static_cast<size_t>(C));
  for (int i = 0; i < S; ++i) {
    for (int j = 0; j < S; ++j) {
      const double* cell = raw.data() + (int64_t(i) * S + j) * D;
      // shared class distribution for the cell
      const double* logits = cell + B * 5;
      double m = logits[0];
      for (int k = 1; k < C; ++k) m = std::max(m, logits[k]);
      double z = 0.0;
      for (int k = 0; k < C; ++k) {
        probs[size_t(k)] = std::exp(logits[k] - m);
        z += probs[size_t(k)];
      }
      int best_k = 0;
      for (int k = 1; k < C; ++k)
        if (probs[size_t(k)] > probs[size_t(best_k)]) best_k = k;
      const double p_best = probs[size_t(best_k)] / z;

      for (int b = 0; b < B; ++b) {
        const double* p = cell + b * 5;
        const double confidence = 1.0 / (1.0 + std::exp(-p[4]));
        const double score = class_score(p_best, confidence);
        if (score < conf_thresh) continue;
        BBox box;
        box.cx = (j + p[0]) / S;
        box.cy = (i + p[1]) / S;
        box.w = p[2];
        box.h = p[3];
        box.class_id = best_k;
        box.score = score;
        // clip to the unit square, drop what collapses
        double x0 = std::clamp(box.cx - box.w / 2, 0.0, 1.0);
        double x1 = std::clamp(box.cx + box.w / 2, 0.0, 1.0);
        double y0 = std::clamp(box.cy - box.h / 2, 0.0, 1.0);
        double y1 = std::clamp(box.cy + box.h / 2, 0.0, 1.0);
        if (x1 - x0 <= 0.0 || y1 - y0 <= 0.0) continue;
        box.cx = (x0 + x1) / 2;
        box.cy = (y0 + y1) / 2;
        box.w = x1 - x0;
        box.h = y1 - y0;
        out.push_back(box);
      }
    }
  }
  return out;
}

std::vector<BBox> nms(const std::vector<BBox>& boxes, double iou_thresh, bool class_aware) {
  std::vector<size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (boxes[a].score != boxes[b].score) return boxes[a].score > boxes[b].score;
    return boxes[a].class_id < boxes[b].class_id;
  });

  std::vector<BBox> kept;
  for (size_t idx : order) {
    const BBox& cand = boxes[idx];
    bool suppressed = false;
    for (const BBox& k : kept) {
      if (class_aware && k.class_id != cand.class_id) continue;
      if (iou(cand, k) >= iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

}  // namespace gridsight
