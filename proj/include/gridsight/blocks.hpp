#pragma once

// The named building blocks of the detector: Conv blocks with autopad,
// RepNBottleneck / RepNCSP / RepNCSPPELAN aggregation stages, ADown
// downsampling, SPPELAN pooling, CB-Linear / CB-Fuse taps, an additive
// reversible coupling block, and the detect head.

#include <optional>

#include "gridsight/ops.hpp"
#include "gridsight/params.hpp"
#include "gridsight/rng.hpp"

namespace gridsight {

// Per-forward execution flags. `batch_stats` selects batch-norm statistics
// (batch vs running); `update_stats` gates running-stat EMA updates.
struct RunCtx {
  bool batch_stats = false;
  bool update_stats = false;

  static RunCtx train() { return {true, true}; }
  static RunCtx infer() { return {false, false}; }
};

enum class BlockKind {
  ConvBlock,
  RepNBottleneck,
  RepNCSP,
  RepNCSPPELAN,
  ADown,
  SPPELAN,
  Silence,
  Upsample,
  Concat,
  CBLinear,
  CBFuse,
  Detect,
  RevCouple,
};

struct BlockSpec {
  BlockKind kind = BlockKind::ConvBlock;
  int in_channels = 0;
  int out_channels = 0;
  int mid_channels = 0;
  int n = 1;       // bottleneck repeats
  int k = 3;       // kernel
  int stride = 1;
  int factor = 2;  // upsample factor
};

// Closed-form output shape for the single-input single-output blocks.
Shape expected_out_shape(const BlockSpec& spec, const Shape& in);

template <typename T>
Tensor<T> normal_init(Rng& rng, Shape shape, double scale) {
  auto t = Tensor<T>::zeros(std::move(shape));
  for (T& v : t.data()) v = T(rng.normal() * scale);
  return t;
}

// Silence: graph identity so the input can feed several consumers.
template <typename T>
Tensor<T> silence(const Tensor<T>& x) {
  return identity(x);
}

// ------------------------------------------------------------------ ConvBlock

// conv (autopad = k/2, odd k, no conv bias) -> batch norm -> SiLU
template <typename T>
class ConvBlock {
 public:
  ConvBlock(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng, int cin, int cout,
            int k, int stride)
      : k_(k), stride_(stride) {
    if (k < 1 || k % 2 == 0)
      throw input_error(prefix + ": conv_block kernel must be odd, got " + std::to_string(k));
    const double scale = 1.0 / std::sqrt(double(cin) * k * k);
    weight_ = reg.add(prefix + ".conv.weight", normal_init<T>(rng, {cout, cin, k, k}, scale));
    gamma_ = reg.add(prefix + ".bn.gamma", Tensor<T>::full({cout}, T(1)));
    beta_ = reg.add(prefix + ".bn.beta", Tensor<T>::zeros({cout}));
    rmean_ = reg.add(prefix + ".bn.running_mean", Tensor<T>::zeros({cout}), false);
    rvar_ = reg.add(prefix + ".bn.running_var", Tensor<T>::full({cout}, T(1)), false);
  }

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) {
    auto y = conv2d(x, weight_, stride_, k_ / 2);
    y = batchnorm2d(y, gamma_, beta_, rmean_, rvar_, ctx.batch_stats, ctx.update_stats,
                    T(kBnEps), T(kBnMomentum));
    return silu(y);
  }

  static constexpr double kBnEps = 1e-5;
  static constexpr double kBnMomentum = 0.03;  // small batches want slow drift

 private:
  Tensor<T> weight_, gamma_, beta_, rmean_, rvar_;
  int k_, stride_;
};

// ------------------------------------------------------------ RepNBottleneck

// Two 3x3 conv blocks with a residual add when cin == cout.
template <typename T>
class RepNBottleneck {
 public:
  RepNBottleneck(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng, int cin, int cout)
      : cv1_(reg, prefix + ".cv1", rng, cin, cout, 3, 1),
        cv2_(reg, prefix + ".cv2", rng, cout, cout, 3, 1),
        residual_(cin == cout) {}

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) {
    auto y = cv2_.forward(cv1_.forward(x, ctx), ctx);
    return residual_ ? add(x, y) : y;
  }

 private:
  ConvBlock<T> cv1_, cv2_;
  bool residual_;
};

// ----------------------------------------------------------------- RepNCSP

// n bottlenecks in sequence (the computational block slot of the GELAN
// stages).
template <typename T>
class RepNCSP {
 public:
  RepNCSP(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng, int cin, int cout, int n) {
    for (int i = 0; i < std::max(1, n); ++i) {
      stages_.emplace_back(reg, prefix + ".m" + std::to_string(i), rng, i == 0 ? cin : cout,
                           cout);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) {
    Tensor<T> cur = x;
    for (auto& s : stages_) cur = s.forward(cur, ctx);
    return cur;
  }

 private:
  std::vector<RepNBottleneck<T>> stages_;
};

// -------------------------------------------------------------- RepNCSPPELAN

// 1x1 to mid channels, split into halves, one half runs through n
// bottleneck stages with every stage output retained, concat of all maps,
// 1x1 to out channels. Spatial size unchanged.
template <typename T>
class RepNCSPPELAN {
 public:
  RepNCSPPELAN(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng, int cin, int cout,
               int c_mid, int n)
      : c_mid_(c_mid),
        cv1_(reg, prefix + ".cv1", rng, cin, check_mid(prefix, c_mid), 1, 1) {
    const int half = c_mid / 2;
    for (int i = 0; i < n; ++i)
      stages_.emplace_back(reg, prefix + ".m" + std::to_string(i), rng, half, half);
    cv2_.emplace(reg, prefix + ".cv2", rng, (n + 2) * half, cout, 1, 1);
  }

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) {
    auto mid = cv1_.forward(x, ctx);
    const int half = c_mid_ / 2;
    std::vector<Tensor<T>> maps;
    maps.push_back(slice_channels(mid, 0, half));
    maps.push_back(slice_channels(mid, half, half));
    for (auto& s : stages_) maps.push_back(s.forward(maps.back(), ctx));
    return cv2_->forward(concat_channels(maps), ctx);
  }

 private:
  static int check_mid(const std::string& prefix, int c_mid) {
    if (c_mid < 2 || c_mid % 2 != 0)
      throw input_error(prefix + ": mid channels must be even, got " + std::to_string(c_mid));
    return c_mid;
  }

  int c_mid_;
  ConvBlock<T> cv1_;
  std::vector<RepNBottleneck<T>> stages_;
  std::optional<ConvBlock<T>> cv2_;
};

// -------------------------------------------------------------------- ADown

// Channel split; first half through a stride-2 3x3 conv block, second half
// through 2x2 max pool then a 1x1 conv block; concatenated. Halves H and W.
template <typename T>
class ADown {
 public:
  ADown(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng, int cin, int cout)
      : cin_(cin),
        cv_a_(reg, prefix + ".cv_a", rng, check_even(prefix, "in", cin) / 2,
              check_even(prefix, "out", cout) / 2, 3, 2),
        cv_b_(reg, prefix + ".cv_b", rng, cin / 2, cout / 2, 1, 1) {}

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) {
    if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
      throw input_error("adown: spatial dims must be even, got " + shape_str(x.shape()));
    auto half_a = slice_channels(x, 0, cin_ / 2);
    auto half_b = slice_channels(x, cin_ / 2, cin_ / 2);
    auto a = cv_a_.forward(half_a, ctx);
    auto b = cv_b_.forward(maxpool2d(half_b, 2, 2, 0), ctx);
    return concat_channels<T>({a, b});
  }

 private:
  static int check_even(const std::string& prefix, const char* which, int c) {
    if (c < 2 || c % 2 != 0)
      throw input_error(prefix + ": adown " + which + " channels must be even, got " +
                        std::to_string(c));
    return c;
  }

  int cin_;
  ConvBlock<T> cv_a_, cv_b_;
};

// ------------------------------------------------------------------ SPPELAN

// 1x1 to mid channels, three chained 5x5 stride-1 max pools with all four
// maps kept, concat, 1x1 to out channels. Spatial size unchanged.
template <typename T>
class SPPELAN {
 public:
  SPPELAN(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng, int cin, int cout,
          int c_mid, int k = 5)
      : k_(k),
        cv1_(reg, prefix + ".cv1", rng, cin, c_mid, 1, 1),
        cv2_(reg, prefix + ".cv2", rng, 4 * c_mid, cout, 1, 1) {}

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) {
    std::vector<Tensor<T>> maps;
    maps.push_back(cv1_.forward(x, ctx));
    for (int i = 0; i < 3; ++i) maps.push_back(maxpool2d(maps.back(), k_, 1, k_ / 2));
    return cv2_.forward(concat_channels(maps), ctx);
  }

 private:
  int k_;
  ConvBlock<T> cv1_, cv2_;
};

// ----------------------------------------------------------------- CBLinear

// 1x1 conv (with bias, no norm) to sum(split_sizes) channels, then an
// in-order channel split.
template <typename T>
class CBLinear {
 public:
  CBLinear(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng, int cin,
           std::vector<int> split_sizes)
      : splits_(std::move(split_sizes)) {
    int total = 0;
    for (int s : splits_) {
      if (s < 1) throw input_error(prefix + ": cb_linear split sizes must be positive");
      total += s;
    }
    const double scale = 1.0 / std::sqrt(double(cin));
    weight_ = reg.add(prefix + ".weight", normal_init<T>(rng, {total, cin, 1, 1}, scale));
    bias_ = reg.add(prefix + ".bias", Tensor<T>::zeros({total}));
  }

  std::vector<Tensor<T>> forward(const Tensor<T>& x, const RunCtx&) {
    auto y = conv2d(x, weight_, bias_, 1, 0);
    std::vector<Tensor<T>> out;
    int c0 = 0;
    for (int s : splits_) {
      out.push_back(slice_channels(y, c0, s));
      c0 += s;
    }
    return out;
  }

 private:
  std::vector<int> splits_;
  Tensor<T> weight_, bias_;
};

// Elementwise sum of nearest-resized pieces and the target map.
template <typename T>
Tensor<T> cb_fuse(const std::vector<Tensor<T>>& pieces, const Tensor<T>& target) {
  Tensor<T> acc = target;
  for (const auto& p : pieces) {
    if (p.dim(1) != target.dim(1))
      throw input_error("cb_fuse: piece channels " + std::to_string(p.dim(1)) +
                        " != target channels " + std::to_string(target.dim(1)));
    acc = add(acc, resize_nearest(p, target.dim(2), target.dim(3)));
  }
  return acc;
}

// ---------------------------------------------------------------- RevCouple

// Additive coupling x=(x1,x2) -> y1 = x1 + f(x2), y2 = x2 + g(y1); exactly
// invertible in exact arithmetic. The inverse re-evaluates f and g with the
// same statistics mode as the forward but never updates running stats.
template <typename T>
class RevCouple {
 public:
  RevCouple(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng, int channels, int k = 3)
      : channels_(check_even(prefix, channels)),
        f_(reg, prefix + ".f", rng, channels / 2, channels / 2, k, 1),
        g_(reg, prefix + ".g", rng, channels / 2, channels / 2, k, 1) {}

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) {
    const int half = channels_ / 2;
    auto x1 = slice_channels(x, 0, half);
    auto x2 = slice_channels(x, half, half);
    auto y1 = add(x1, f_.forward(x2, ctx));
    auto y2 = add(x2, g_.forward(y1, ctx));
    return concat_channels<T>({y1, y2});
  }

  Tensor<T> inverse(const Tensor<T>& y, RunCtx ctx) {
    ctx.update_stats = false;
    const int half = channels_ / 2;
    auto y1 = slice_channels(y, 0, half);
    auto y2 = slice_channels(y, half, half);
    auto x2 = sub(y2, g_.forward(y1, ctx));
    auto x1 = sub(y1, f_.forward(x2, ctx));
    return concat_channels<T>({x1, x2});
  }

 private:
  static int check_even(const std::string& prefix, int c) {
    if (c < 2 || c % 2 != 0)
      throw input_error(prefix + ": rev_couple channels must be even, got " + std::to_string(c));
    return c;
  }

  int channels_;
  ConvBlock<T> f_, g_;
};

// --------------------------------------------------------------- DetectHead

// Per-scale 1x1 convs to B*5+C channels. x,y,w,h are squashed with a
// sigmoid; confidence and class logits pass through raw. Output layout is
// N,S,S,(B*5+C); confidence biases start at -4 so initial objectness is low.
template <typename T>
class DetectHead {
 public:
  DetectHead(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng,
             std::vector<int> cin_per_scale, int B, int C)
      : B_(B), C_(C) {
    const int D = B * 5 + C;
    for (size_t s = 0; s < cin_per_scale.size(); ++s) {
      const int cin = cin_per_scale[s];
      const double scale = 1.0 / std::sqrt(double(cin));
      weights_.push_back(reg.add(prefix + ".s" + std::to_string(s) + ".weight",
                                 normal_init<T>(rng, {D, cin, 1, 1}, scale)));
      auto bias = Tensor<T>::zeros({D});
      for (int b = 0; b < B; ++b) bias.data()[size_t(b * 5 + 4)] = T(-4);
      biases_.push_back(reg.add(prefix + ".s" + std::to_string(s) + ".bias", std::move(bias)));
    }
  }

  std::vector<Tensor<T>> forward(const std::vector<Tensor<T>>& features, const RunCtx&) {
    if (features.size() != weights_.size())
      throw input_error("detect_head: expected " + std::to_string(weights_.size()) +
                        " feature maps, got " + std::to_string(features.size()));
    std::vector<Tensor<T>> out;
    for (size_t s = 0; s < features.size(); ++s) {
      auto raw = conv2d(features[s], weights_[s], biases_[s], 1, 0);
      std::vector<Tensor<T>> parts;
      for (int b = 0; b < B_; ++b) {
        parts.push_back(sigmoid(slice_channels(raw, b * 5, 4)));
        parts.push_back(slice_channels(raw, b * 5 + 4, 1));
      }
      parts.push_back(slice_channels(raw, B_ * 5, C_));
      out.push_back(nchw_to_nhwc(concat_channels(parts)));
    }
    return out;
  }

  int num_scales() const { return int(weights_.size()); }

 private:
  int B_, C_;
  std::vector<Tensor<T>> weights_;
  std::vector<Tensor<T>> biases_;
};

}  // namespace gridsight
