#pragma once

// Dataset ingestion and target encoding. On-disk layout:
//   root/classes.txt                 one class name per line
//   root/images/<split>/*.ppm       binary PPM, paired by stem with
//   root/labels/<split>/*.txt       "class_id cx cy w h" per object
// plus the deterministic synthetic-shapes generator used for desk-scale
// training runs.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "gridsight/ppm.hpp"
#include "gridsight/rng.hpp"
#include "gridsight/tensor.hpp"

namespace gridsight {

struct Annotation {
  int class_id = 0;
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;  // normalized center format
};

struct Sample {
  std::string id;  // filename stem
  std::filesystem::path image_path;
  std::vector<Annotation> boxes;
};

class Dataset {
 public:
  size_t size() const { return samples_.size(); }
  const Sample& sample(size_t i) const { return samples_.at(i); }
  const std::vector<std::string>& class_names() const { return class_names_; }
  int num_classes() const { return int(class_names_.size()); }
  int missing_labels() const { return missing_labels_; }

  // decoded image, cached after first access
  const Image& image(size_t i) const;
  void preload_images() const;

  friend Dataset load_dataset(const std::filesystem::path& root, const std::string& split);

 private:
  std::vector<Sample> samples_;
  std::vector<std::string> class_names_;
  int missing_labels_ = 0;
  mutable std::vector<std::unique_ptr<Image>> cache_;
};

Dataset load_dataset(const std::filesystem::path& root, const std::string& split);

// ------------------------------------------------------------- target grids

// Amplitude used for objectness / one-hot slots in encoded target grids.
// Stored in logit space so that running a target grid through decode_grid
// (sigmoid on confidence, softmax over classes) reproduces the encoded
// boxes at conf 0.5 and empty cells stay below it.
inline constexpr double kTargetLogit = 16.0;

struct EncodedTargets {
  int S = 0, B = 0, C = 0;
  std::vector<double> grid;        // S*S*(B*5+C)
  std::vector<uint8_t> cell_mask;  // S*S, 1 where an object landed
  int dropped = 0;                 // same-cell collisions resolved by larger area
};

EncodedTargets encode_targets(const std::vector<Annotation>& boxes, int S, int B, int C);

// ---------------------------------------------------------------- synthesis

// Glyph classes, in class-id order.
enum class GlyphKind { Disk = 0, Square = 1, Triangle = 2, Ring = 3, Cross = 4 };

struct Glyph {
  int class_id = 0;
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // pixel-space extents
  uint8_t color[3] = {0, 0, 0};
};

struct Scene {
  int size = 0;
  uint64_t bg_seed = 0;
  std::vector<Glyph> glyphs;
};

struct SynthConfig {
  int n_train = 0, n_val = 0, n_test = 0;
  int classes = 3;  // at most 5
  int size = 160;
  uint64_t seed = 7;
};

Scene sample_scene(Rng& rng, int classes, int size);
bool glyph_covers(const Glyph& g, double px, double py);  // pixel-center test
Image rasterize(const Scene& scene);
Annotation glyph_annotation(const Glyph& g, int size);

// Writes images/labels/classes.txt under root; byte-identical per seed.
void synth_shapes(const std::filesystem::path& root, const SynthConfig& cfg);

// ----------------------------------------------------------------- batching

// Deterministic shuffle per (seed, epoch); the final partial batch is kept.
std::vector<std::vector<size_t>> batch_indices(size_t n, int batch_size, uint64_t seed,
                                               int epoch, bool shuffle);

template <typename T>
Tensor<T> image_to_tensor(const Image& img, int size) {
  Image r = resize_image(img, size);
  std::vector<T> v(size_t(3) * size * size);
  const int64_t plane = int64_t(size) * size;
  for (int64_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) v[size_t(c * plane + p)] = T(r.rgb[size_t(p * 3 + c)]) / T(255);
  return Tensor<T>::from({1, 3, size, size}, std::move(v));
}

template <typename T>
struct Batch {
  Tensor<T> images;                              // [N,3,size,size]
  std::vector<Tensor<T>> target_grids;           // per scale, [N,S,S,B*5+C]
  std::vector<std::vector<uint8_t>> cell_masks;  // per scale, N*S*S
  int dropped = 0;
};

template <typename T>
Batch<T> make_batch(const Dataset& ds, const std::vector<size_t>& idx, int input_size,
                    const std::vector<int>& grid_sizes, int B, int C) {
  const int N = int(idx.size());
  if (N == 0) throw input_error("make_batch: empty index list");
  Batch<T> batch;
  const int64_t img_len = int64_t(3) * input_size * input_size;
  std::vector<T> images(size_t(N) * img_len);
  for (int n = 0; n < N; ++n) {
    Tensor<T> one = image_to_tensor<T>(ds.image(idx[size_t(n)]), input_size);
    std::copy(one.data().begin(), one.data().end(), images.begin() + int64_t(n) * img_len);
  }
  batch.images = Tensor<T>::from({N, 3, input_size, input_size}, std::move(images));

  for (int S : grid_sizes) {
    const int64_t cell_len = int64_t(S) * S * (B * 5 + C);
    std::vector<T> grid(size_t(N) * cell_len);
    std::vector<uint8_t> mask(size_t(N) * S * S);
    for (int n = 0; n < N; ++n) {
      EncodedTargets enc = encode_targets(ds.sample(idx[size_t(n)]).boxes, S, B, C);
      batch.dropped += enc.dropped;
      for (int64_t i = 0; i < cell_len; ++i)
        grid[size_t(int64_t(n) * cell_len + i)] = T(enc.grid[size_t(i)]);
      std::copy(enc.cell_mask.begin(), enc.cell_mask.end(),
                mask.begin() + int64_t(n) * S * S);
    }
    batch.target_grids.push_back(Tensor<T>::from({N, S, S, B * 5 + C}, std::move(grid)));
    batch.cell_masks.push_back(std::move(mask));
  }
  return batch;
}

}  // namespace gridsight
