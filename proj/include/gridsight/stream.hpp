#pragma once

// Frame-stream inference: a decode thread feeds a bounded (capacity 2)
// FIFO hand-off; the consumer runs single-frame inference and collects
// wall-clock latency around the forward call only.

#include <functional>
#include <optional>

#include "gridsight/eval.hpp"

namespace gridsight {

class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual std::optional<Image> next() = 0;
};

// Sorted *.ppm files from a directory.
class DirFrames : public FrameSource {
 public:
  explicit DirFrames(const std::filesystem::path& dir);
  std::optional<Image> next() override;

 private:
  std::vector<std::filesystem::path> files_;
  size_t at_ = 0;
};

// Deterministic synthetic scenes, e.g. for latency comparisons.
class SynthFrames : public FrameSource {
 public:
  SynthFrames(int count, int size, int classes, uint64_t seed);
  std::optional<Image> next() override;

 private:
  int count_, size_, classes_;
  int at_ = 0;
  Rng rng_;
};

struct LatencyReport {
  std::string preset;
  int frames = 0;
  double mean_ms = 0.0, p50_ms = 0.0, p95_ms = 0.0;
  double achieved_fps = 0.0;  // frames over total loop wall time
  double target_fps = 0.0;    // 0 when no target was requested
  std::vector<double> frame_ms;
};

// Runs every frame through the pipeline in FIFO order. The sink sees the
// frame index, the decoded image, and its post-NMS detections.
LatencyReport run_stream(
    Model<float>& model, FrameSource& source, double conf_thresh, double iou_thresh,
    double target_fps = 0.0,
    const std::function<void(int, const Image&, const std::vector<BBox>&)>& sink = {});

}  // namespace gridsight
