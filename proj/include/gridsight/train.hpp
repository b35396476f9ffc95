#pragma once

// Composite detection loss (YOLOv1-family functional over main and
// auxiliary predictions), SGD with momentum, and the training loop.

#include "gridsight/boxes.hpp"
#include "gridsight/data.hpp"
#include "gridsight/model.hpp"

namespace gridsight {

struct Hyper {
  int epochs = 30;
  int batch_size = 8;
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lambda_coord = 5.0;
  double lambda_noobj = 0.5;
  double lambda_aux = 0.25;
  double warmup_frac = 0.03;  // linear warmup over the first 3% of steps
  double eval_conf = 0.05;    // decode threshold for per-epoch metrics
  double eval_iou = 0.45;     // NMS threshold for per-epoch metrics
};

struct LossBreakdown {
  double box = 0.0, cls = 0.0, obj = 0.0, aux = 0.0, total = 0.0;
};

template <typename T>
struct LossOut {
  Tensor<T> total;  // graph scalar
  LossBreakdown parts;
};

namespace detail {

// Responsibility assignment and detached targets for one branch on one
// scale. These derive from current forward values and enter the loss graph
// as constants; freezing them once also makes the functional
// finite-difference checkable.
template <typename T>
struct ScaleAssign {
  int N = 0, S = 0;
  std::vector<std::vector<T>> resp, noobj;          // per predictor, N*S*S
  std::vector<std::vector<T>> tx, ty, tsw, tsh;     // box targets at responsible slots
  std::vector<std::vector<T>> tobj;                 // current-IoU objectness targets
  std::vector<T> cls_mask;                          // N*S*S
  std::vector<T> onehot;                            // N*S*S*C
};

template <typename T>
ScaleAssign<T> compute_assignments(const Tensor<T>& pred, const Tensor<T>& target,
                                   const std::vector<uint8_t>& cell_mask, int B, int C) {
  if (pred.shape() != target.shape())
    throw input_error("compute_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                      shape_str(target.shape()));
  const int N = pred.dim(0), S = pred.dim(1);
  const int D = B * 5 + C;
  if (pred.dim(3) != D)
    throw input_error("compute_loss: last dim " + std::to_string(pred.dim(3)) + " != B*5+C = " +
                      std::to_string(D));
  const int64_t cells = int64_t(N) * S * S;
  if (int64_t(cell_mask.size()) != cells)
    throw input_error("compute_loss: cell mask length mismatch");

  ScaleAssign<T> as;
  as.N = N;
  as.S = S;
  as.resp.assign(size_t(B), std::vector<T>(size_t(cells), T(0)));
  as.noobj.assign(size_t(B), std::vector<T>(size_t(cells), T(1)));
  as.tx.assign(size_t(B), std::vector<T>(size_t(cells), T(0)));
  as.ty = as.tx;
  as.tsw = as.tx;
  as.tsh = as.tx;
  as.tobj = as.tx;
  as.cls_mask.assign(size_t(cells), T(0));
  as.onehot.assign(size_t(cells) * C, T(0));

  const T* pv = pred.data().data();
  const T* tv = target.data().data();
  for (int64_t cell = 0; cell < cells; ++cell) {
    if (!cell_mask[size_t(cell)]) continue;
    as.cls_mask[size_t(cell)] = T(1);
    const int64_t within = cell % (int64_t(S) * S);
    const int i = int(within / S), j = int(within % S);
    const T* tcell = tv + cell * D;
    // ground truth from the canonical b=0 slots
    BBox gt;
    gt.cx = (j + double(tcell[0])) / S;
    gt.cy = (i + double(tcell[1])) / S;
    gt.w = double(tcell[2]);
    gt.h = double(tcell[3]);
    int cls = 0;
    for (int k = 1; k < C; ++k)
      if (tcell[B * 5 + k] > tcell[B * 5 + cls]) cls = k;
    as.onehot[size_t(cell) * C + cls] = T(1);

    const T* pcell = pv + cell * D;
    int best_b = 0;
    double best_iou = -1.0;
    for (int b = 0; b < B; ++b) {
      BBox pb;
      pb.cx = (j + double(pcell[b * 5 + 0])) / S;
      pb.cy = (i + double(pcell[b * 5 + 1])) / S;
      pb.w = double(pcell[b * 5 + 2]);
      pb.h = double(pcell[b * 5 + 3]);
      const double v = iou(pb, gt);
      if (v > best_iou) {
        best_iou = v;
        best_b = b;
      }
    }
    as.resp[size_t(best_b)][size_t(cell)] = T(1);
    as.noobj[size_t(best_b)][size_t(cell)] = T(0);
    as.tobj[size_t(best_b)][size_t(cell)] = T(std::clamp(best_iou, 0.0, 1.0));
    as.tx[size_t(best_b)][size_t(cell)] = tcell[0];
    as.ty[size_t(best_b)][size_t(cell)] = tcell[1];
    as.tsw[size_t(best_b)][size_t(cell)] = T(std::sqrt(double(tcell[2])));
    as.tsh[size_t(best_b)][size_t(cell)] = T(std::sqrt(double(tcell[3])));
  }
  return as;
}

template <typename T>
struct BranchTerms {
  Tensor<T> box, obj, cls;
};

template <typename T>
BranchTerms<T> scale_branch_loss(const Tensor<T>& pred, const ScaleAssign<T>& as, int B, int C,
                                 double lambda_noobj) {
  const int N = as.N, S = as.S;
  const Shape cell_shape{N, S, S, 1};
  auto constant = [&](std::vector<T> v) { return Tensor<T>::from(cell_shape, std::move(v)); };

  BranchTerms<T> terms;
  Tensor<T> box_acc, obj_acc, noobj_acc;
  for (int b = 0; b < B; ++b) {
    auto resp_t = constant(as.resp[size_t(b)]);
    auto noobj_t = constant(as.noobj[size_t(b)]);
    auto xb = slice_last(pred, b * 5 + 0, 1);
    auto yb = slice_last(pred, b * 5 + 1, 1);
    auto wb = slice_last(pred, b * 5 + 2, 1);
    auto hb = slice_last(pred, b * 5 + 3, 1);
    auto conf = sigmoid(slice_last(pred, b * 5 + 4, 1));

    auto dx = sub(xb, constant(as.tx[size_t(b)]));
    auto dy = sub(yb, constant(as.ty[size_t(b)]));
    auto dw = sub(sqrt_elem(wb), constant(as.tsw[size_t(b)]));
    auto dh = sub(sqrt_elem(hb), constant(as.tsh[size_t(b)]));
    auto coord = add(add(mul(dx, dx), mul(dy, dy)), add(mul(dw, dw), mul(dh, dh)));
    auto box_b = sum(mul(resp_t, coord));

    auto dconf = sub(conf, constant(as.tobj[size_t(b)]));
    auto obj_b = sum(mul(resp_t, mul(dconf, dconf)));
    auto noobj_b = sum(mul(noobj_t, mul(conf, conf)));

    box_acc = b == 0 ? box_b : add(box_acc, box_b);
    obj_acc = b == 0 ? obj_b : add(obj_acc, obj_b);
    noobj_acc = b == 0 ? noobj_b : add(noobj_acc, noobj_b);
  }
  terms.box = box_acc;
  terms.obj = add(obj_acc, mul_scalar(noobj_acc, T(lambda_noobj)));

  auto logits = slice_last(pred, B * 5, C);
  auto xent = softmax_xent_lastdim(
      logits, Tensor<T>::from({N, S, S, C}, std::vector<T>(as.onehot)));
  terms.cls = sum(mul(constant(as.cls_mask), xent));
  return terms;
}

template <typename T>
struct BranchTotal {
  Tensor<T> graph;  // lambda_coord * box + obj + cls
  double box = 0.0, obj = 0.0, cls = 0.0;
};

template <typename T>
BranchTotal<T> branch_total(const std::vector<Tensor<T>>& preds,
                            const std::vector<Tensor<T>>& targets,
                            const std::vector<std::vector<uint8_t>>& masks, int B, int C,
                            const Hyper& hy,
                            const std::vector<ScaleAssign<T>>* frozen = nullptr) {
  Tensor<T> box, obj, cls;
  for (size_t s = 0; s < preds.size(); ++s) {
    ScaleAssign<T> local;
    const ScaleAssign<T>* as = frozen ? &(*frozen)[s] : &local;
    if (!frozen) local = compute_assignments(preds[s], targets[s], masks[s], B, C);
    auto terms = scale_branch_loss(preds[s], *as, B, C, hy.lambda_noobj);
    box = s == 0 ? terms.box : add(box, terms.box);
    obj = s == 0 ? terms.obj : add(obj, terms.obj);
    cls = s == 0 ? terms.cls : add(cls, terms.cls);
  }
  BranchTotal<T> out;
  auto box_w = mul_scalar(box, T(hy.lambda_coord));
  out.graph = add(add(box_w, obj), cls);
  out.box = double(box_w.item());
  out.obj = double(obj.item());
  out.cls = double(cls.item());
  return out;
}

}  // namespace detail

// Composite loss over all scales; aux predictions (when present) run the
// same functional against the same targets, weighted by lambda_aux.
template <typename T>
LossOut<T> compute_loss(const Predictions<T>& preds, const Batch<T>& batch, const Hyper& hy,
                        int B, int C) {
  if (preds.main.size() != batch.target_grids.size())
    throw input_error("compute_loss: " + std::to_string(preds.main.size()) +
                      " prediction scales vs " + std::to_string(batch.target_grids.size()) +
                      " target scales");
  LossOut<T> out;
  auto main = detail::branch_total(preds.main, batch.target_grids, batch.cell_masks, B, C, hy);
  out.parts.box = main.box;
  out.parts.obj = main.obj;
  out.parts.cls = main.cls;
  out.total = main.graph;
  if (!preds.aux.empty()) {
    auto aux = detail::branch_total(preds.aux, batch.target_grids, batch.cell_masks, B, C, hy);
    out.parts.aux = aux.box + aux.obj + aux.cls;
    out.total = add(out.total, mul_scalar(aux.graph, T(hy.lambda_aux)));
  }
  out.parts.total = out.parts.box + out.parts.obj + out.parts.cls +
                    hy.lambda_aux * out.parts.aux;
  return out;
}

// Snapshot of responsibility/targets for finite-difference checks: the loss
// functional is differentiable only with the assignments held fixed.
template <typename T>
struct FrozenAssignments {
  std::vector<detail::ScaleAssign<T>> main, aux;
};

template <typename T>
FrozenAssignments<T> freeze_assignments(const Predictions<T>& preds, const Batch<T>& batch,
                                        int B, int C) {
  FrozenAssignments<T> out;
  for (size_t s = 0; s < preds.main.size(); ++s)
    out.main.push_back(detail::compute_assignments(preds.main[s], batch.target_grids[s],
                                                   batch.cell_masks[s], B, C));
  for (size_t s = 0; s < preds.aux.size(); ++s)
    out.aux.push_back(detail::compute_assignments(preds.aux[s], batch.target_grids[s],
                                                  batch.cell_masks[s], B, C));
  return out;
}

template <typename T>
Tensor<T> compute_loss_frozen(const Predictions<T>& preds, const Batch<T>& batch,
                              const FrozenAssignments<T>& frozen, const Hyper& hy, int B,
                              int C) {
  auto main =
      detail::branch_total(preds.main, batch.target_grids, batch.cell_masks, B, C, hy,
                           &frozen.main);
  Tensor<T> total = main.graph;
  if (!preds.aux.empty()) {
    auto aux = detail::branch_total(preds.aux, batch.target_grids, batch.cell_masks, B, C, hy,
                                    &frozen.aux);
    total = add(total, mul_scalar(aux.graph, T(hy.lambda_aux)));
  }
  return total;
}

// --------------------------------------------------------------------- SGD

// v <- momentum*v + grad + weight_decay*p;  p <- p - lr*v;  grads zeroed.
template <typename T>
class SgdMomentum {
 public:
  explicit SgdMomentum(ParamRegistry<T>& reg) : reg_(&reg) {
    for (auto& p : reg.entries()) velocity_.emplace_back(size_t(p.tensor.size()), T(0));
  }

  void step(double lr, double momentum, double weight_decay) {
    auto& entries = reg_->entries();
    for (size_t i = 0; i < entries.size(); ++i) {
      auto& p = entries[i];
      if (!p.trainable) continue;
      auto vals = p.tensor.data();
      auto grads = p.tensor.grad();
      auto& vel = velocity_[i];
      for (size_t k = 0; k < vel.size(); ++k) {
        vel[k] = T(momentum) * vel[k] + grads[k] + T(weight_decay) * vals[k];
        vals[k] -= T(lr) * vel[k];
      }
    }
    reg_->zero_grads();
  }

 private:
  ParamRegistry<T>* reg_;
  std::vector<std::vector<T>> velocity_;
};

// ------------------------------------------------------------ training loop

struct EpochStats {
  int epoch = 0;
  LossBreakdown loss;  // means over the epoch's steps
  double precision = 0.0, recall = 0.0, map50 = 0.0, map50_95 = 0.0;
};

using TrainHistory = std::vector<EpochStats>;

template <typename T>
struct EvalHook {
  // fills precision/recall/map fields after each epoch
  std::function<void(Model<T>&, EpochStats&)> fn;
};

template <typename T>
TrainHistory train_model(Model<T>& model, const Dataset& train_ds, const Hyper& hy,
                         const EvalHook<T>& eval_hook = {},
                         const std::function<void(const EpochStats&)>& on_epoch = {}) {
  if (train_ds.size() == 0) throw input_error("train: empty dataset");
  const ModelConfig& cfg = model.config();
  if (train_ds.num_classes() != cfg.num_classes)
    throw input_error("train: dataset has " + std::to_string(train_ds.num_classes()) +
                      " classes, model expects " + std::to_string(cfg.num_classes));

  SgdMomentum<T> opt(model.params());
  const auto grids = cfg.grid_sizes();
  const int64_t steps_per_epoch =
      int64_t((train_ds.size() + size_t(hy.batch_size) - 1) / size_t(hy.batch_size));
  const int64_t total_steps = steps_per_epoch * hy.epochs;
  const int64_t warmup = std::max<int64_t>(1, int64_t(hy.warmup_frac * double(total_steps)));

  TrainHistory history;
  int64_t step = 0;
  for (int epoch = 0; epoch < hy.epochs; ++epoch) {
    auto batches = batch_indices(train_ds.size(), hy.batch_size, cfg.seed, epoch, true);
    LossBreakdown mean;
    for (const auto& idx : batches) {
      Batch<T> batch =
          make_batch<T>(train_ds, idx, cfg.input_size, grids, cfg.boxes_per_cell, cfg.num_classes);
      auto preds = model.forward(batch.images, Mode::Train);
      auto loss = compute_loss(preds, batch, hy, cfg.boxes_per_cell, cfg.num_classes);
      if (!std::isfinite(loss.parts.total))
        throw numeric_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                            " step " + std::to_string(step));
      backward(loss.total);
      const double lr = hy.lr * std::min(1.0, double(step + 1) / double(warmup));
      opt.step(lr, hy.momentum, hy.weight_decay);
      mean.box += loss.parts.box;
      mean.cls += loss.parts.cls;
      mean.obj += loss.parts.obj;
      mean.aux += loss.parts.aux;
      mean.total += loss.parts.total;
      ++step;
    }
    const double inv = 1.0 / double(batches.size());
    mean.box *= inv;
    mean.cls *= inv;
    mean.obj *= inv;
    mean.aux *= inv;
    mean.total *= inv;

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = mean;
    if (eval_hook.fn) eval_hook.fn(model, stats);
    if (on_epoch) on_epoch(stats);
    history.push_back(stats);
  }
  return history;
}

}  // namespace gridsight
