// gridsight: train / eval / detect / stream / gen-data / grad-check for the
// toy single-stage detector. Exit codes: 0 ok, 2 input error, 3 numeric
// failure.

#include <CLI11.hpp>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "gridsight/checkpoint.hpp"
#include "gridsight/eval.hpp"
#include "gridsight/grad_check.hpp"
#include "gridsight/stream.hpp"
#include "gridsight/train.hpp"

using namespace gridsight;

namespace {

ModelConfig config_from_flag(const std::string& flag) {
  if (flag == "c" || flag == "e") return ModelConfig::preset_named(flag);
  std::ifstream f(flag);
  if (!f) throw input_error("config '" + flag + "' is neither a preset name nor a readable file");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return config_from_json(text);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string fmt_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

constexpr const char* kMetricsSchema = "# schema=gridsight-metrics-v1";
constexpr const char* kMetricsHeader =
    "epoch,box_loss,cls_loss,obj_loss,aux_loss,precision,recall,map50,map50_95";

void write_detections_dump(const std::filesystem::path& path,
                           const std::vector<std::string>& ids,
                           const std::vector<std::vector<BBox>>& dets) {
  std::ofstream out(path);
  if (!out) throw input_error("cannot write " + path.string());
  for (size_t i = 0; i < dets.size(); ++i)
    for (const BBox& d : dets[i])
      out << ids[i] << " " << d.class_id << " " << fmt_exact(d.score) << " "
          << fmt_exact(d.cx) << " " << fmt_exact(d.cy) << " " << fmt_exact(d.w) << " "
          << fmt_exact(d.h) << "\n";
}

void print_eval_report(const EvalReport& r, const std::vector<std::string>& names) {
  std::printf("%-12s %6s %6s %9s %9s %8s %8s %6s\n", "class", "gt", "tp", "precision",
              "recall", "ap50", "ap50-95", "fp");
  for (const auto& c : r.per_class) {
    const std::string name =
        size_t(c.class_id) < names.size() ? names[size_t(c.class_id)] : "?";
    std::printf("%-12s %6" PRId64 " %6" PRId64 " %9.4f %9.4f %8.4f %8.4f %6" PRId64 "\n",
                name.c_str(), c.n_gt, c.tp, c.precision, c.recall, c.ap50, c.ap50_95, c.fp);
  }
  std::printf("%-12s %6" PRId64 " %6s %9.4f %9.4f %8.4f %8.4f\n", "all", r.total_gt, "-",
              r.precision, r.recall, r.map50, r.map50_95);
  std::printf("P/R reported at the F1-maximizing confidence %.4f (F1 %.4f)\n",
              r.conf_threshold, r.f1);
}

void write_eval_csv(const std::filesystem::path& path, const EvalReport& r,
                    const std::vector<std::string>& names) {
  std::ofstream out(path);
  if (!out) throw input_error("cannot write " + path.string());
  out << "# schema=gridsight-eval-v1\n";
  out << "class,n_gt,tp,fp,fn,precision,recall,ap50,ap50_95\n";
  for (const auto& c : r.per_class) {
    const std::string name =
        size_t(c.class_id) < names.size() ? names[size_t(c.class_id)] : "?";
    out << name << "," << c.n_gt << "," << c.tp << "," << c.fp << "," << c.fn << ","
        << fmt(c.precision) << "," << fmt(c.recall) << "," << fmt(c.ap50) << ","
        << fmt(c.ap50_95) << "\n";
  }
  out << "all," << r.total_gt << ",,,," << fmt(r.precision) << "," << fmt(r.recall) << ","
      << fmt(r.map50) << "," << fmt(r.map50_95) << "\n";
}

const uint8_t kClassColors[][3] = {
    {230, 57, 70}, {67, 160, 71}, {30, 136, 229}, {251, 192, 45}, {142, 36, 170},
    {0, 172, 193}, {244, 81, 30}, {124, 179, 66}, {94, 53, 177},  {255, 112, 67},
};

void draw_box(Image& img, const BBox& box, int class_id) {
  const uint8_t* color = kClassColors[size_t(class_id) % 10];
  const int x0 = std::clamp(int((box.cx - box.w / 2) * img.w), 0, img.w - 1);
  const int x1 = std::clamp(int((box.cx + box.w / 2) * img.w), 0, img.w - 1);
  const int y0 = std::clamp(int((box.cy - box.h / 2) * img.h), 0, img.h - 1);
  const int y1 = std::clamp(int((box.cy + box.h / 2) * img.h), 0, img.h - 1);
  auto paint = [&](int x, int y) {
    uint8_t* p = img.px(x, y);
    p[0] = color[0];
    p[1] = color[1];
    p[2] = color[2];
  };
  for (int t = 0; t < 2; ++t) {  // 2-pixel frame
    for (int x = x0; x <= x1; ++x) {
      paint(x, std::min(y0 + t, img.h - 1));
      paint(x, std::max(y1 - t, 0));
    }
    for (int y = y0; y <= y1; ++y) {
      paint(std::min(x0 + t, img.w - 1), y);
      paint(std::max(x1 - t, 0), y);
    }
  }
}

// ------------------------------------------------------------------- train

int cmd_train(const std::string& data, const std::string& config, int epochs, int batch,
              double lr, uint64_t seed, const std::string& out) {
  Dataset train_ds = load_dataset(data, "train");
  Dataset val_ds = load_dataset(data, "val");
  if (train_ds.missing_labels() > 0)
    std::fprintf(stderr, "warning: %d images without label files (treated as empty)\n",
                 train_ds.missing_labels());

  ModelConfig cfg = config_from_flag(config);
  cfg.num_classes = train_ds.num_classes();
  cfg.seed = seed;
  Model<float> model(cfg);
  std::printf("model preset=%s parameters=%" PRId64 " (aux %" PRId64 ")\n",
              cfg.preset.c_str(), model.param_count(), model.aux_param_count());

  Hyper hy;
  hy.epochs = epochs;
  hy.batch_size = batch;
  hy.lr = lr;

  const std::filesystem::path prefix(out);
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  const auto csv_path = out + "_metrics.csv";
  const auto best_path = out + "_best.ckpt";
  const auto last_path = out + "_last.ckpt";

  std::ofstream csv(csv_path);
  if (!csv) throw input_error("cannot write " + csv_path);
  csv << kMetricsSchema << "\n" << kMetricsHeader << "\n";

  double best_map50 = -1.0;
  EvalHook<float> hook;
  hook.fn = [&](Model<float>& m, EpochStats& stats) {
    if (val_ds.size() == 0) return;
    auto ev = evaluate_model(m, val_ds, hy.eval_conf, hy.eval_iou);
    stats.precision = ev.report.precision;
    stats.recall = ev.report.recall;
    stats.map50 = ev.report.map50;
    stats.map50_95 = ev.report.map50_95;
  };
  auto on_epoch = [&](const EpochStats& s) {
    csv << s.epoch << "," << fmt(s.loss.box) << "," << fmt(s.loss.cls) << ","
        << fmt(s.loss.obj) << "," << fmt(s.loss.aux) << "," << fmt(s.precision) << ","
        << fmt(s.recall) << "," << fmt(s.map50) << "," << fmt(s.map50_95) << "\n";
    csv.flush();
    std::printf("epoch %3d  loss %.4f (box %.4f cls %.4f obj %.4f aux %.4f)  map50 %.4f  "
                "map50-95 %.4f\n",
                s.epoch, s.loss.total, s.loss.box, s.loss.cls, s.loss.obj, s.loss.aux, s.map50,
                s.map50_95);
    if (s.map50 > best_map50) {
      best_map50 = s.map50;
      save_checkpoint(model, best_path);
    }
  };

  train_model(model, train_ds, hy, hook, on_epoch);
  if (best_map50 < 0.0) save_checkpoint(model, best_path);  // 0 epochs
  save_checkpoint(model, last_path);
  std::printf("wrote %s, %s, %s\n", csv_path.c_str(), best_path.c_str(), last_path.c_str());
  return 0;
}

// -------------------------------------------------------------------- eval

int cmd_eval(const std::string& data, const std::string& ckpt, const std::string& split,
             double conf, double iou_thresh, const std::string& out) {
  Model<float> model = load_checkpoint(ckpt);
  Dataset ds = load_dataset(data, split);
  if (ds.num_classes() != model.config().num_classes)
    throw input_error("dataset has " + std::to_string(ds.num_classes()) +
                      " classes but checkpoint config has " +
                      std::to_string(model.config().num_classes));

  auto ev = evaluate_model(model, ds, conf, iou_thresh);
  print_eval_report(ev.report, ds.class_names());

  std::filesystem::create_directories(out);
  std::vector<std::string> ids;
  for (size_t i = 0; i < ds.size(); ++i) ids.push_back(ds.sample(i).id);
  write_detections_dump(std::filesystem::path(out) / "detections.txt", ids, ev.detections);
  write_eval_csv(std::filesystem::path(out) / "report.csv", ev.report, ds.class_names());
  std::printf("wrote %s/detections.txt and %s/report.csv\n", out.c_str(), out.c_str());
  return 0;
}

// ------------------------------------------------------------------ detect

int cmd_detect(const std::string& ckpt, const std::string& input, const std::string& out,
               double conf, double iou_thresh) {
  Model<float> model = load_checkpoint(ckpt);
  namespace fs = std::filesystem;
  std::vector<fs::path> inputs;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.is_regular_file() && e.path().extension() == ".ppm") inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else {
    inputs.push_back(input);
  }
  if (inputs.empty()) throw input_error("no .ppm images under " + input);

  fs::create_directories(out);
  std::vector<std::string> ids;
  std::vector<std::vector<BBox>> all_dets;
  int failures = 0;
  for (const auto& path : inputs) {
    Image img;
    try {
      img = read_ppm(path);
    } catch (const std::exception& e) {
      std::fprintf(stderr, "warning: skipping %s: %s\n", path.c_str(), e.what());
      ++failures;
      continue;
    }
    auto dets = detect_image(model, img, conf, iou_thresh);
    for (const BBox& d : dets) draw_box(img, d, d.class_id);
    write_ppm(fs::path(out) / path.filename(), img);
    ids.push_back(path.stem().string());
    all_dets.push_back(std::move(dets));
  }
  if (ids.empty()) throw input_error("all inputs failed to decode");
  write_detections_dump(fs::path(out) / "detections.txt", ids, all_dets);
  std::printf("annotated %zu image(s) into %s (%d skipped)\n", ids.size(), out.c_str(),
              failures);
  return 0;
}

// ------------------------------------------------------------------ stream

int cmd_stream(const std::string& ckpt, const std::string& frames, double fps_target,
               double conf, double iou_thresh, const std::string& out) {
  Model<float> model = load_checkpoint(ckpt);
  std::unique_ptr<FrameSource> source;
  if (frames.rfind("synth:", 0) == 0) {
    // synth:<count>[:<seed>]
    const std::string spec = frames.substr(6);
    const auto colon = spec.find(':');
    const int count = std::atoi(spec.substr(0, colon).c_str());
    const uint64_t seed =
        colon == std::string::npos ? 7 : std::strtoull(spec.substr(colon + 1).c_str(), nullptr, 10);
    if (count < 1) throw input_error("stream: synth frame count must be >= 1");
    source = std::make_unique<SynthFrames>(count, model.config().input_size,
                                           std::min(model.config().num_classes, 5), seed);
  } else {
    source = std::make_unique<DirFrames>(frames);
  }

  const std::filesystem::path prefix(out);
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  std::ofstream dump(out + "_detections.txt");
  if (!dump) throw input_error("cannot write " + out + "_detections.txt");
  auto sink = [&](int index, const Image&, const std::vector<BBox>& dets) {
    for (const BBox& d : dets)
      dump << "frame" << index << " " << d.class_id << " " << fmt_exact(d.score) << " "
           << fmt_exact(d.cx) << " " << fmt_exact(d.cy) << " " << fmt_exact(d.w) << " "
           << fmt_exact(d.h) << "\n";
  };
  LatencyReport report = run_stream(model, *source, conf, iou_thresh, fps_target, sink);

  std::ofstream csv(out + "_latency.csv");
  if (!csv) throw input_error("cannot write " + out + "_latency.csv");
  csv << "# schema=gridsight-latency-v1 (per-frame values are wall-clock, non-deterministic)\n";
  csv << "frame,ms\n";
  for (size_t i = 0; i < report.frame_ms.size(); ++i)
    csv << i << "," << fmt(report.frame_ms[i]) << "\n";

  std::printf("preset %s: %d frames, inference mean %.2f ms, p50 %.2f ms, p95 %.2f ms\n",
              report.preset.c_str(), report.frames, report.mean_ms, report.p50_ms,
              report.p95_ms);
  std::printf("achieved %.2f fps", report.achieved_fps);
  if (fps_target > 0.0)
    std::printf(" against a %.2f fps target (%s)", fps_target,
                report.achieved_fps >= fps_target ? "met" : "missed");
  std::printf("\n");
  return 0;
}

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(int n, int n_val, int n_test, int classes, int size, uint64_t seed,
                 const std::string& out) {
  SynthConfig cfg;
  cfg.n_train = n;
  cfg.n_val = n_val >= 0 ? n_val : n / 8;
  cfg.n_test = n_test;
  cfg.classes = classes;
  cfg.size = size;
  cfg.seed = seed;
  synth_shapes(out, cfg);
  std::printf("wrote %d train / %d val / %d test images (%d classes, %dpx) under %s\n",
              cfg.n_train, cfg.n_val, cfg.n_test, cfg.classes, cfg.size, out.c_str());
  return 0;
}

// -------------------------------------------------------------- grad-check

struct BlockCheck {
  std::string name;
  GradCheckReport report;
};

int cmd_grad_check(const std::string& config, uint64_t seed, double tol) {
  (void)config;
  std::vector<BlockCheck> rows;
  Rng master(seed);
  auto ctx = RunCtx{true, false};

  auto check = [&](const std::string& name, const std::function<Tensor<double>()>& builder,
                   std::vector<std::pair<std::string, Tensor<double>>> inputs) {
    rows.push_back({name, grad_check(builder, std::move(inputs), 1e-5, tol)});
  };
  auto rand_t = [&](Shape shape, double lo = -1.0, double hi = 1.0) {
    auto t = Tensor<double>::zeros(std::move(shape));
    for (double& v : t.data()) v = master.uniform(lo, hi);
    return t;
  };
  auto gapped = [&](Shape shape) {
    auto t = Tensor<double>::zeros(std::move(shape));
    auto d = t.data();
    for (size_t i = 0; i < d.size(); ++i) d[i] = master.uniform(-1.0, 1.0) + double(i) * 7e-3;
    for (size_t i = d.size(); i > 1; --i) std::swap(d[i - 1], d[master.bits() % i]);
    return t;
  };
  auto all_params = [](ParamRegistry<double>& reg,
                       std::vector<std::pair<std::string, Tensor<double>>> seedv = {}) {
    for (auto& p : reg.entries())
      if (p.trainable) seedv.emplace_back(p.name, p.tensor);
    return seedv;
  };

  {
    auto x = rand_t({2, 2, 4, 4});
    auto w = rand_t({3, 2, 3, 3});
    auto b = rand_t({3});
    check("conv2d", [&] { return sum(silu(conv2d(x, w, b, 1, 1))); },
          {{"x", x}, {"w", w}, {"b", b}});
  }
  {
    auto x = rand_t({2, 2, 3, 3});
    auto gamma = rand_t({2}, 0.5, 1.5);
    auto beta = rand_t({2});
    auto rm = Tensor<double>::zeros({2});
    auto rv = Tensor<double>::full({2}, 1.0);
    check("batchnorm2d",
          [&] {
            return sum(silu(batchnorm2d(x, gamma, beta, rm, rv, true, false, 1e-5, 0.03)));
          },
          {{"x", x}, {"gamma", gamma}, {"beta", beta}});
  }
  {
    auto x = rand_t({3, 5});
    check("silu", [&] { return sum(mul(silu(x), x)); }, {{"x", x}});
    check("sigmoid", [&] { return sum(mul(sigmoid(x), x)); }, {{"x", x}});
  }
  {
    auto x = gapped({1, 2, 6, 6});
    check("maxpool2d", [&] { return sum(silu(maxpool2d(x, 3, 1, 1))); }, {{"x", x}});
  }
  {
    auto x = rand_t({1, 2, 3, 3});
    check("upsample_nearest", [&] { return sum(mul(upsample_nearest(x, 2), upsample_nearest(x, 2))); },
          {{"x", x}});
  }
  {
    auto a = rand_t({1, 2, 3, 3});
    auto b = rand_t({1, 3, 3, 3});
    check("concat_channels",
          [&] {
            auto c = concat_channels<double>({a, b});
            return sum(mul(c, c));
          },
          {{"a", a}, {"b", b}});
    check("add", [&] { return sum(mul(add(a, a), a)); }, {{"a", a}});
  }
  {
    auto x = rand_t({2, 2}, 0.2, 2.0);
    check("sqrt", [&] { return sum(mul(sqrt_elem(x), x)); }, {{"x", x}});
  }
  {
    auto x = rand_t({4, 3}, -2.0, 2.0);
    auto t = Tensor<double>::zeros({4, 3});
    for (int rr = 0; rr < 4; ++rr) t.data()[size_t(rr * 3 + master.uniform_int(0, 2))] = 1.0;
    check("softmax_xent", [&] { return sum(softmax_xent_lastdim(x, t)); }, {{"x", x}});
  }
  {
    auto x = rand_t({1, 3, 4, 4});
    check("silence",
          [&] {
            auto s = silence(x);
            return sum(add(mul(s, s), silu(s)));
          },
          {{"x", x}});
  }
  {
    ParamRegistry<double> reg;
    Rng init = master.fork(11);
    ConvBlock<double> blk(reg, "b", init, 3, 4, 3, 1);
    auto x = rand_t({2, 3, 4, 4});
    check("conv_block", [&] { return sum(blk.forward(x, ctx)); }, all_params(reg, {{"x", x}}));
  }
  {
    ParamRegistry<double> reg;
    Rng init = master.fork(12);
    RepNBottleneck<double> blk(reg, "b", init, 4, 4);
    auto x = rand_t({2, 4, 4, 4});
    check("repn_bottleneck", [&] { return sum(mul(blk.forward(x, ctx), blk.forward(x, ctx))); },
          all_params(reg, {{"x", x}}));
  }
  {
    ParamRegistry<double> reg;
    Rng init = master.fork(13);
    RepNCSP<double> blk(reg, "b", init, 4, 4, 2);
    auto x = rand_t({2, 4, 3, 3});
    check("repncsp", [&] { return sum(mul(blk.forward(x, ctx), blk.forward(x, ctx))); },
          all_params(reg, {{"x", x}}));
  }
  {
    ParamRegistry<double> reg;
    Rng init = master.fork(14);
    RepNCSPPELAN<double> blk(reg, "b", init, 4, 4, 4, 1);
    auto x = rand_t({2, 4, 4, 4});
    check("repncsppelan", [&] { return sum(mul(blk.forward(x, ctx), blk.forward(x, ctx))); },
          all_params(reg, {{"x", x}}));
  }
  {
    ParamRegistry<double> reg;
    Rng init = master.fork(15);
    ADown<double> blk(reg, "b", init, 4, 4);
    auto x = gapped({1, 4, 4, 4});
    check("adown", [&] { return sum(silu(blk.forward(x, ctx))); }, all_params(reg, {{"x", x}}));
  }
  {
    ParamRegistry<double> reg;
    Rng init = master.fork(16);
    SPPELAN<double> blk(reg, "b", init, 4, 4, 2);
    auto x = gapped({1, 4, 5, 5});
    check("sppelan", [&] { return sum(silu(blk.forward(x, ctx))); }, all_params(reg, {{"x", x}}));
  }
  {
    ParamRegistry<double> reg;
    Rng init = master.fork(17);
    CBLinear<double> blk(reg, "b", init, 4, {2, 3});
    auto x = rand_t({1, 4, 3, 3});
    check("cb_linear",
          [&] {
            auto outs = blk.forward(x, ctx);
            return add(sum(mul(outs[0], outs[0])), sum(mul(outs[1], outs[1])));
          },
          all_params(reg, {{"x", x}}));
  }
  {
    auto p1 = rand_t({1, 3, 2, 2});
    auto p2 = rand_t({1, 3, 4, 4});
    auto target = rand_t({1, 3, 4, 4});
    check("cb_fuse",
          [&] {
            auto f = cb_fuse<double>({p1, p2}, target);
            return sum(mul(f, f));
          },
          {{"p1", p1}, {"p2", p2}, {"target", target}});
  }
  {
    ParamRegistry<double> reg;
    Rng init = master.fork(18);
    RevCouple<double> blk(reg, "b", init, 4);
    auto x = rand_t({2, 4, 3, 3});
    check("rev_couple", [&] { return sum(mul(blk.forward(x, ctx), blk.forward(x, ctx))); },
          all_params(reg, {{"x", x}}));
  }
  {
    ParamRegistry<double> reg;
    Rng init = master.fork(19);
    DetectHead<double> blk(reg, "b", init, {3}, 1, 2);
    auto x = rand_t({1, 3, 3, 3});
    check("detect_head",
          [&] {
            auto outs = blk.forward({x}, ctx);
            return sum(mul(outs[0], outs[0]));
          },
          all_params(reg, {{"x", x}}));
  }
  {
    // full composite loss on a tiny 64-bit model
    ModelConfig cfg;
    cfg.preset = "tiny";
    cfg.input_size = 32;
    cfg.num_classes = 2;
    cfg.boxes_per_cell = 1;
    cfg.strides = {8, 16, 32};
    cfg.width = 4;
    cfg.depth = 1;
    cfg.seed = seed;
    Model<double> model(cfg);
    auto x = rand_t({2, 3, 32, 32}, 0.0, 1.0);
    std::vector<Annotation> boxes{{0, 0.55, 0.45, 0.5, 0.6}};
    Batch<double> batch;
    for (int S : cfg.grid_sizes()) {
      auto enc = encode_targets(boxes, S, cfg.boxes_per_cell, cfg.num_classes);
      std::vector<double> grid;
      std::vector<uint8_t> mask;
      for (int nn = 0; nn < 2; ++nn) {
        grid.insert(grid.end(), enc.grid.begin(), enc.grid.end());
        mask.insert(mask.end(), enc.cell_mask.begin(), enc.cell_mask.end());
      }
      batch.target_grids.push_back(
          Tensor<double>::from({2, S, S, cfg.head_dim()}, std::move(grid)));
      batch.cell_masks.push_back(std::move(mask));
    }
    Hyper hy;
    auto base = model.forward(x, Mode::Train, ctx);
    auto frozen = freeze_assignments(base, batch, cfg.boxes_per_cell, cfg.num_classes);
    std::vector<std::pair<std::string, Tensor<double>>> inputs;
    for (auto& p : model.params().entries())
      if (p.trainable && p.tensor.size() <= 64) inputs.emplace_back(p.name, p.tensor);
    check("composite_loss",
          [&] {
            auto preds = model.forward(x, Mode::Train, ctx);
            return compute_loss_frozen(preds, batch, frozen, hy, cfg.boxes_per_cell,
                                       cfg.num_classes);
          },
          std::move(inputs));
  }

  std::printf("%-18s %12s %10s %8s\n", "block", "max_err", "checked", "result");
  bool all_pass = true;
  for (const auto& row : rows) {
    const bool pass = row.report.passed();
    all_pass = all_pass && pass;
    std::printf("%-18s %12.3e %10" PRId64 " %8s\n", row.name.c_str(), row.report.max_error,
                row.report.checked, pass ? "pass" : "FAIL");
    if (!pass)
      std::printf("  worst: %s[%" PRId64 "] analytic %.6e numeric %.6e\n",
                  row.report.worst.input.c_str(), row.report.worst.index,
                  row.report.worst.analytic, row.report.worst.numeric);
  }
  if (!all_pass) throw numeric_error("gradient check failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gridsight: grid-decoding single-stage detector"};
  app.require_subcommand(1);

  std::string data, config = "c", out = "run", ckpt, split = "val", input, frames;
  int epochs = 30, batch = 8, n = 0, n_val = -1, n_test = 0, classes = 3, size = 160;
  double lr = 1e-2, conf = 0.25, iou_thresh = 0.45, tol = 1e-4, fps_target = 0.0;
  uint64_t seed = 7;

  auto* train = app.add_subcommand("train", "train on a YOLO-format dataset");
  train->add_option("--data", data, "dataset root")->required();
  train->add_option("--config", config, "preset name (c|e) or config json path");
  train->add_option("--epochs", epochs, "training epochs");
  train->add_option("--batch", batch, "batch size");
  train->add_option("--lr", lr, "peak learning rate");
  train->add_option("--seed", seed, "RNG seed");
  train->add_option("--out", out, "output prefix for checkpoint/metrics files");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval->add_option("--data", data, "dataset root")->required();
  eval->add_option("--ckpt", ckpt, "checkpoint path")->required();
  eval->add_option("--split", split, "dataset split");
  eval->add_option("--conf", conf, "confidence threshold");
  eval->add_option("--iou", iou_thresh, "NMS IoU threshold");
  eval->add_option("--out", out, "output directory");

  auto* detect = app.add_subcommand("detect", "annotate images with detections");
  detect->add_option("--ckpt", ckpt, "checkpoint path")->required();
  detect->add_option("--input", input, "image file or directory of .ppm files")->required();
  detect->add_option("--out", out, "output directory");
  detect->add_option("--conf", conf, "confidence threshold");
  detect->add_option("--iou", iou_thresh, "NMS IoU threshold");

  auto* stream = app.add_subcommand("stream", "frame-stream inference with latency stats");
  stream->add_option("--ckpt", ckpt, "checkpoint path")->required();
  stream->add_option("--frames", frames, "frame directory or synth:<count>[:<seed>]")
      ->required();
  stream->add_option("--fps-target", fps_target, "frames/s target for the report");
  stream->add_option("--conf", conf, "confidence threshold");
  stream->add_option("--iou", iou_thresh, "NMS IoU threshold");
  stream->add_option("--out", out, "output prefix");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shapes dataset");
  gen->add_option("--n", n, "training images")->required();
  gen->add_option("--n-val", n_val, "validation images (default n/8)");
  gen->add_option("--n-test", n_test, "test images");
  gen->add_option("--classes", classes, "class count (1..5)");
  gen->add_option("--size", size, "image size in pixels");
  gen->add_option("--seed", seed, "RNG seed");
  gen->add_option("--out", out, "dataset root to create")->required();

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every block");
  gc->add_option("--config", config, "preset used for the composite check");
  gc->add_option("--seed", seed, "RNG seed");
  gc->add_option("--tol", tol, "pass tolerance");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(data, config, epochs, batch, lr, seed, out);
    if (eval->parsed()) return cmd_eval(data, ckpt, split, conf, iou_thresh, out);
    if (detect->parsed()) return cmd_detect(ckpt, input, out, conf, iou_thresh);
    if (stream->parsed())
      return cmd_stream(ckpt, frames, fps_target, conf, iou_thresh, out);
    if (gen->parsed()) return cmd_gen_data(n, n_val, n_test, classes, size, seed, out);
    if (gc->parsed()) return cmd_grad_check(config, seed, tol);
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const input_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
