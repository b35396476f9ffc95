#include "gridsight/stream.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

namespace gridsight {

DirFrames::DirFrames(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw input_error("frame directory missing: " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") files_.push_back(e.path());
  std::sort(files_.begin(), files_.end());
}

std::optional<Image> DirFrames::next() {
  if (at_ >= files_.size()) return std::nullopt;
  return read_ppm(files_[at_++]);
}

SynthFrames::SynthFrames(int count, int size, int classes, uint64_t seed)
    : count_(count), size_(size), classes_(classes), rng_(seed) {}

std::optional<Image> SynthFrames::next() {
  if (at_ >= count_) return std::nullopt;
  ++at_;
  return rasterize(sample_scene(rng_, classes_, size_));
}

namespace {

// capacity-2 FIFO hand-off between the decode and inference stages
class BoundedFrameQueue {
 public:
  void push(Image img) {
    std::unique_lock lk(m_);
    cv_push_.wait(lk, [&] { return q_.size() < 2; });
    q_.push_back(std::move(img));
    cv_pop_.notify_one();
  }
  void close() {
    std::lock_guard lk(m_);
    closed_ = true;
    cv_pop_.notify_all();
  }
  std::optional<Image> pop() {
    std::unique_lock lk(m_);
    cv_pop_.wait(lk, [&] { return !q_.empty() || closed_; });
    if (q_.empty()) return std::nullopt;
    Image img = std::move(q_.front());
    q_.pop_front();
    cv_push_.notify_one();
    return img;
  }

 private:
  std::mutex m_;
  std::condition_variable cv_push_, cv_pop_;
  std::deque<Image> q_;
  bool closed_ = false;
};

}  // namespace

LatencyReport run_stream(
    Model<float>& model, FrameSource& source, double conf_thresh, double iou_thresh,
    double target_fps,
    const std::function<void(int, const Image&, const std::vector<BBox>&)>& sink) {
  using clock = std::chrono::steady_clock;
  BoundedFrameQueue queue;
  std::thread decoder([&] {
    while (auto img = source.next()) queue.push(std::move(*img));
    queue.close();
  });

  LatencyReport report;
  report.preset = model.config().preset;
  report.target_fps = target_fps;
  const int input_size = model.config().input_size;
  const auto loop_start = clock::now();
  int index = 0;
  while (auto img = queue.pop()) {
    auto tensor = image_to_tensor<float>(*img, input_size);
    NoGradGuard ng;
    const auto t0 = clock::now();
    auto preds = model.forward(tensor, Mode::Infer);
    const auto t1 = clock::now();
    report.frame_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());

    std::vector<BBox> all;
    for (const auto& grid : preds.main) {
      std::vector<double> raw(grid.data().begin(), grid.data().end());
      auto boxes = decode_grid(raw, grid.dim(1), model.config().boxes_per_cell,
                               model.config().num_classes, conf_thresh);
      all.insert(all.end(), boxes.begin(), boxes.end());
    }
    auto dets = nms(all, iou_thresh, true);
    if (sink) sink(index, *img, dets);
    ++index;
  }
  const double loop_s =
      std::chrono::duration<double>(clock::now() - loop_start).count();
  decoder.join();

  report.frames = index;
  if (report.frames == 0) throw input_error("stream: empty frame source");
  double total = 0.0;
  for (double v : report.frame_ms) total += v;
  report.mean_ms = total / double(report.frames);
  std::vector<double> sorted = report.frame_ms;
  std::sort(sorted.begin(), sorted.end());
  report.p50_ms = sorted[size_t((sorted.size() - 1) * 50 / 100)];
  report.p95_ms = sorted[size_t((sorted.size() - 1) * 95 / 100)];
  report.achieved_fps = double(report.frames) / loop_s;
  return report;
}

}  // namespace gridsight
