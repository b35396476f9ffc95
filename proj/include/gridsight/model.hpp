#pragma once

// Toy detector assembly: Silence -> conv stem -> alternating ADown /
// RepNCSPPELAN stages (one feature map per scale, SPPELAN at the deepest),
// an upsample+concat+RepNCSPPELAN neck, per-scale detect heads, and a
// train-only auxiliary branch (reversible trunk + CB-Linear taps off the
// backbone fused by CB-Fuse into separate aux heads).

#include "gridsight/blocks.hpp"

namespace gridsight {

struct ModelConfig {
  std::string preset = "c";
  int input_size = 160;
  int num_classes = 3;
  int boxes_per_cell = 2;
  std::vector<int> strides = {8, 16, 32};
  int width = 16;  // base channel count
  int depth = 1;   // bottleneck repeats per aggregation stage
  bool aux_enabled = true;
  uint64_t seed = 0;

  void validate() const {
    if (input_size < 1) throw input_error("config: input_size must be positive");
    if (num_classes < 1) throw input_error("config: need at least one class");
    if (boxes_per_cell < 1) throw input_error("config: need at least one box per cell");
    if (width < 2 || width % 2 != 0) throw input_error("config: width must be even and >= 2");
    if (depth < 0) throw input_error("config: negative depth");
    if (strides.empty()) throw input_error("config: need at least one scale");
    int prev = 2;
    for (int s : strides) {
      if (s < 4 || s % prev != 0 || (prev >= 4 && s != prev * 2))
        throw input_error("config: strides must double from 4 upward, got stride " +
                          std::to_string(s));
      if (input_size % s != 0)
        throw input_error("config: input_size " + std::to_string(input_size) +
                          " not divisible by stride " + std::to_string(s));
      prev = s;
    }
    if (strides.front() < 8)
      throw input_error("config: shallowest scale stride must be >= 8");
  }

  std::vector<int> grid_sizes() const {
    std::vector<int> out;
    for (int s : strides) out.push_back(input_size / s);
    return out;
  }

  int head_dim() const { return boxes_per_cell * 5 + num_classes; }

  // channel ledger: width at stride 2, capped ramp of +width per halving
  int channels_at(int stride) const {
    int steps = 0;
    for (int s = 2; s < stride; s *= 2) ++steps;
    return width * std::min(4, std::max(1, steps + 1));
  }

  static ModelConfig preset_named(const std::string& name) {
    ModelConfig cfg;
    cfg.preset = name;
    if (name == "c") {
      cfg.width = 16;
      cfg.depth = 1;
    } else if (name == "e") {
      cfg.width = 24;
      cfg.depth = 2;
    } else {
      throw input_error("unknown preset '" + name + "' (expected c or e)");
    }
    return cfg;
  }
};

enum class Mode { Train, Infer };

template <typename T>
struct Predictions {
  std::vector<Tensor<T>> main;  // per scale, N,S,S,(B*5+C)
  std::vector<Tensor<T>> aux;   // same shapes; empty outside train mode
};

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  Predictions<T> forward(const Tensor<T>& images, Mode mode) {
    return forward(images, mode, mode == Mode::Train ? RunCtx::train() : RunCtx::infer());
  }

  Predictions<T> forward(const Tensor<T>& images, Mode mode, RunCtx ctx) {
    if (mode == Mode::Train && stripped_)
      throw input_error("stripped model cannot run in train mode");
    if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.input_size ||
        images.dim(3) != cfg_.input_size)
      throw input_error("forward: expected N,3," + std::to_string(cfg_.input_size) + "," +
                        std::to_string(cfg_.input_size) + " input, got " +
                        shape_str(images.shape()));

    auto x0 = silence(images);
    auto t = stem_->forward(x0, ctx);
    std::vector<Tensor<T>> feats;
    for (size_t i = 0; i < downs_.size(); ++i) {
      t = downs_[i].forward(t, ctx);
      t = elans_[i].forward(t, ctx);
      if (stage_is_scale_[i]) {
        if (i + 1 == downs_.size()) t = sppelan_->forward(t, ctx);
        feats.push_back(t);
      }
    }

    // top-down neck, deepest feature passes through untouched
    const size_t n_scales = feats.size();
    std::vector<Tensor<T>> necked(n_scales);
    necked[n_scales - 1] = feats[n_scales - 1];
    for (size_t i = n_scales - 1; i-- > 0;) {
      auto up = upsample_nearest(necked[i + 1], 2);
      necked[i] = neck_[i].forward(concat_channels<T>({up, feats[i]}), ctx);
    }

    Predictions<T> preds;
    preds.main = head_->forward(necked, ctx);

    if (mode == Mode::Train && cfg_.aux_enabled) {
      // CB-Linear taps off every backbone scale; tap i yields one piece for
      // each scale j <= i
      std::vector<std::vector<Tensor<T>>> pieces(n_scales);
      for (size_t i = 0; i < n_scales; ++i) {
        auto split = cbl_[i].forward(feats[i], ctx);
        for (size_t j = 0; j < split.size(); ++j) pieces[j].push_back(split[j]);
      }
      // reversible trunk from the silenced input down to the first scale
      auto a = x0;
      for (auto& cb : aux_stem_) a = cb.forward(a, ctx);
      a = rev_->forward(a, ctx);
      std::vector<Tensor<T>> aux_feats;
      for (size_t j = 0; j < n_scales; ++j) {
        if (j > 0) a = aux_down_[j - 1].forward(aux_feats.back(), ctx);
        a = cb_fuse(pieces[j], a);
        aux_feats.push_back(a);
      }
      preds.aux = aux_head_->forward(aux_feats, ctx);
    }
    return preds;
  }

  // Same weights, auxiliary branch removed; refuses train mode.
  Model stripped() const {
    ModelConfig cfg = cfg_;
    cfg.aux_enabled = false;
    Model out(std::move(cfg));
    out.stripped_ = true;
    for (auto& p : out.reg_.entries()) {
      const Parameter<T>* src = reg_.find(p.name);
      if (!src) throw input_error("strip: missing source parameter " + p.name);
      std::copy(src->tensor.data().begin(), src->tensor.data().end(), p.tensor.data().begin());
    }
    return out;
  }

  bool is_stripped() const { return stripped_; }
  const ModelConfig& config() const { return cfg_; }
  ParamRegistry<T>& params() { return reg_; }
  const ParamRegistry<T>& params() const { return reg_; }
  int64_t param_count() const { return reg_.total_values(); }
  int64_t aux_param_count() const { return reg_.aux_values(); }
  void zero_grads() { reg_.zero_grads(); }

 private:
  void build() {
    Rng rng(cfg_.seed);
    const int w = cfg_.width;
    stem_.emplace(reg_, "backbone.stem", rng, 3, w, 3, 2);

    int stride = 2;
    int ch = w;
    int stage = 0;
    const int deepest = cfg_.strides.back();
    while (stride < deepest) {
      stride *= 2;
      const int next_ch = cfg_.channels_at(stride);
      const std::string prefix = "backbone.stage" + std::to_string(stage++);
      downs_.emplace_back(reg_, prefix + ".down", rng, ch, next_ch);
      elans_.emplace_back(reg_, prefix + ".elan", rng, next_ch, next_ch, next_ch, cfg_.depth);
      const bool is_scale =
          std::find(cfg_.strides.begin(), cfg_.strides.end(), stride) != cfg_.strides.end();
      stage_is_scale_.push_back(is_scale);
      if (is_scale) scale_channels_.push_back(next_ch);
      ch = next_ch;
    }
    sppelan_.emplace(reg_, "backbone.sppelan", rng, ch, ch, ch / 2);

    const size_t n_scales = cfg_.strides.size();
    for (size_t i = 0; i + 1 < n_scales; ++i) {
      const int cat = scale_channels_[i] + scale_channels_[i + 1];
      neck_.emplace_back(reg_, "neck.scale" + std::to_string(i), rng, cat, scale_channels_[i],
                         scale_channels_[i], cfg_.depth);
    }
    head_.emplace(reg_, "head", rng, scale_channels_, cfg_.boxes_per_cell, cfg_.num_classes);

    if (cfg_.aux_enabled) {
      reg_.set_aux_scope(true);
      for (size_t i = 0; i < n_scales; ++i) {
        std::vector<int> splits(scale_channels_.begin(),
                                scale_channels_.begin() + int64_t(i) + 1);
        cbl_.emplace_back(reg_, "aux.cbl" + std::to_string(i), rng, scale_channels_[i],
                          std::move(splits));
      }
      int astride = 1, ach = 3, idx = 0;
      while (astride < cfg_.strides.front()) {
        astride *= 2;
        const int next = astride == cfg_.strides.front() ? scale_channels_[0]
                                                         : w * (idx + 1);
        aux_stem_.emplace_back(reg_, "aux.stem" + std::to_string(idx++), rng, ach, next, 3, 2);
        ach = next;
      }
      rev_.emplace(reg_, "aux.rev", rng, scale_channels_[0]);
      for (size_t j = 0; j + 1 < n_scales; ++j)
        aux_down_.emplace_back(reg_, "aux.down" + std::to_string(j), rng, scale_channels_[j],
                               scale_channels_[j + 1]);
      aux_head_.emplace(reg_, "aux.head", rng, scale_channels_, cfg_.boxes_per_cell,
                        cfg_.num_classes);
      reg_.set_aux_scope(false);
    }
  }

  ModelConfig cfg_;
  bool stripped_ = false;
  ParamRegistry<T> reg_;

  std::optional<ConvBlock<T>> stem_;
  std::vector<ADown<T>> downs_;
  std::vector<RepNCSPPELAN<T>> elans_;
  std::vector<bool> stage_is_scale_;
  std::vector<int> scale_channels_;
  std::optional<SPPELAN<T>> sppelan_;
  std::vector<RepNCSPPELAN<T>> neck_;
  std::optional<DetectHead<T>> head_;

  std::vector<CBLinear<T>> cbl_;
  std::vector<ConvBlock<T>> aux_stem_;
  std::optional<RevCouple<T>> rev_;
  std::vector<ADown<T>> aux_down_;
  std::optional<DetectHead<T>> aux_head_;
};

}  // namespace gridsight
