#pragma once

// Dataset-level inference and scoring: per-image decode + NMS across all
// scales, matched against ground truth. Worker fan-out is capped by the
// GRIDSIGHT_THREADS environment variable (default 1); results merge in
// sample-index order, so the thread count never changes the output.

#include <atomic>
#include <cstdlib>
#include <thread>

#include "gridsight/data.hpp"
#include "gridsight/metrics.hpp"
#include "gridsight/model.hpp"

namespace gridsight {

inline int worker_threads() {
  const char* env = std::getenv("GRIDSIGHT_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

// Decode every scale of an inference forward and suppress across the union.
template <typename T>
std::vector<BBox> detect_image(Model<T>& model, const Tensor<T>& image, double conf_thresh,
                               double iou_thresh) {
  NoGradGuard ng;
  auto preds = model.forward(image, Mode::Infer);
  const auto& cfg = model.config();
  std::vector<BBox> all;
  for (const auto& grid : preds.main) {
    const int S = grid.dim(1);
    std::vector<double> raw(grid.data().begin(), grid.data().end());
    auto boxes = decode_grid(raw, S, cfg.boxes_per_cell, cfg.num_classes, conf_thresh);
    all.insert(all.end(), boxes.begin(), boxes.end());
  }
  return nms(all, iou_thresh, true);
}

template <typename T>
std::vector<BBox> detect_image(Model<T>& model, const Image& img, double conf_thresh,
                               double iou_thresh) {
  return detect_image(model, image_to_tensor<T>(img, model.config().input_size), conf_thresh,
                      iou_thresh);
}

struct DatasetEval {
  EvalReport report;
  std::vector<std::vector<BBox>> detections;
  std::vector<std::vector<BBox>> truths;
};

template <typename T>
DatasetEval evaluate_model(Model<T>& model, const Dataset& ds, double conf_thresh,
                           double iou_thresh) {
  DatasetEval out;
  out.detections.resize(ds.size());
  out.truths.resize(ds.size());
  for (size_t i = 0; i < ds.size(); ++i)
    for (const Annotation& a : ds.sample(i).boxes)
      out.truths[i].push_back(BBox{a.cx, a.cy, a.w, a.h, a.class_id, 1.0});

  ds.preload_images();
  const int threads = std::min<int>(worker_threads(), std::max<size_t>(ds.size(), 1));
  if (threads <= 1) {
    for (size_t i = 0; i < ds.size(); ++i)
      out.detections[i] = detect_image(model, ds.image(i), conf_thresh, iou_thresh);
  } else {
    // infer-mode forwards mutate nothing; workers share the model read-only
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&]() {
        for (size_t i = next.fetch_add(1); i < ds.size(); i = next.fetch_add(1))
          out.detections[i] = detect_image(model, ds.image(i), conf_thresh, iou_thresh);
      });
    }
    for (auto& th : pool) th.join();
  }

  out.report = evaluate_detections(out.detections, out.truths, ds.num_classes());
  return out;
}

}  // namespace gridsight
