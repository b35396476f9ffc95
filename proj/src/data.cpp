#include "gridsight/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "gridsight/boxes.hpp"

namespace gridsight {

const Image& Dataset::image(size_t i) const {
  if (cache_.size() != samples_.size()) cache_.resize(samples_.size());
  if (!cache_[i]) cache_[i] = std::make_unique<Image>(read_ppm(samples_[i].image_path));
  return *cache_[i];
}

void Dataset::preload_images() const {
  for (size_t i = 0; i < samples_.size(); ++i) image(i);
}

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

double parse_coord(const std::string& tok, const std::string& where) {
  size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(tok, &pos);
  } catch (const std::logic_error&) {
    throw input_error(where + ": non-numeric field '" + tok + "'");
  }
  if (pos != tok.size()) throw input_error(where + ": non-numeric field '" + tok + "'");
  return v;
}

std::vector<Annotation> parse_label_file(const std::filesystem::path& path, int num_classes) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open label file: " + path.string());
  std::vector<Annotation> boxes;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    auto toks = split_ws(line);
    if (toks.size() != 5)
      throw input_error(where + ": expected 5 fields, got " + std::to_string(toks.size()));
    Annotation a;
    double cls = parse_coord(toks[0], where);
    if (cls != std::floor(cls) || cls < 0 || cls >= num_classes)
      throw input_error(where + ": class_id " + toks[0] + " outside [0," +
                        std::to_string(num_classes) + ")");
    a.class_id = int(cls);
    a.cx = parse_coord(toks[1], where);
    a.cy = parse_coord(toks[2], where);
    a.w = parse_coord(toks[3], where);
    a.h = parse_coord(toks[4], where);
    if (a.cx < 0.0 || a.cx > 1.0 || a.cy < 0.0 || a.cy > 1.0)
      throw input_error(where + ": center outside [0,1]");
    if (a.w <= 0.0 || a.w > 1.0 || a.h <= 0.0 || a.h > 1.0)
      throw input_error(where + ": size outside (0,1]");
    boxes.push_back(a);
  }
  return boxes;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& root, const std::string& split) {
  namespace fs = std::filesystem;
  Dataset ds;

  const fs::path classes_file = root / "classes.txt";
  std::ifstream cls(classes_file);
  if (!cls) throw input_error("cannot open " + classes_file.string());
  std::string line;
  while (std::getline(cls, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) ds.class_names_.push_back(line);
  }
  if (ds.class_names_.empty()) throw input_error("empty class list: " + classes_file.string());

  const fs::path img_dir = root / "images" / split;
  const fs::path lbl_dir = root / "labels" / split;
  if (!fs::is_directory(img_dir)) throw input_error("missing image directory: " + img_dir.string());

  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(img_dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });

  for (const auto& img_path : files) {
    Sample s;
    s.id = img_path.stem().string();
    s.image_path = img_path;
    const fs::path lbl = lbl_dir / (s.id + ".txt");
    if (fs::exists(lbl)) {
      s.boxes = parse_label_file(lbl, ds.num_classes());
    } else {
      ++ds.missing_labels_;
    }
    ds.samples_.push_back(std::move(s));
  }
  return ds;
}

// ------------------------------------------------------------- target grids

EncodedTargets encode_targets(const std::vector<Annotation>& boxes, int S, int B, int C) {
  if (S < 1 || B < 1 || C < 1) throw input_error("encode_targets: bad S/B/C");
  EncodedTargets enc;
  enc.S = S;
  enc.B = B;
  enc.C = C;
  const int D = B * 5 + C;
  enc.grid.assign(size_t(S) * S * D, 0.0);
  enc.cell_mask.assign(size_t(S) * S, 0);
  std::vector<double> cell_area(size_t(S) * S, 0.0);

  for (const Annotation& a : boxes) {
    const int j = std::clamp(int(std::floor(a.cx * S)), 0, S - 1);
    const int i = std::clamp(int(std::floor(a.cy * S)), 0, S - 1);
    const size_t cell = size_t(i) * S + j;
    const double area = a.w * a.h;
    if (enc.cell_mask[cell]) {
      ++enc.dropped;
      if (area <= cell_area[cell]) continue;  // keep the larger box
    }
    cell_area[cell] = area;
    enc.cell_mask[cell] = 1;
    double* g = enc.grid.data() + cell * D;
    const double x_off = a.cx * S - j;
    const double y_off = a.cy * S - i;
    for (int b = 0; b < B; ++b) {
      g[b * 5 + 0] = x_off;
      g[b * 5 + 1] = y_off;
      g[b * 5 + 2] = a.w;
      g[b * 5 + 3] = a.h;
      g[b * 5 + 4] = b == 0 ? kTargetLogit : -kTargetLogit;
    }
    for (int k = 0; k < C; ++k) g[B * 5 + k] = k == a.class_id ? kTargetLogit : 0.0;
  }
  return enc;
}

// ---------------------------------------------------------------- synthesis

bool glyph_covers(const Glyph& g, double px, double py) {
  const double cx = (g.x0 + g.x1) / 2, cy = (g.y0 + g.y1) / 2;
  const double hw = (g.x1 - g.x0) / 2, hh = (g.y1 - g.y0) / 2;
  switch (GlyphKind(g.class_id)) {
    case GlyphKind::Disk: {
      const double dx = (px - cx) / hw, dy = (py - cy) / hh;
      return dx * dx + dy * dy <= 1.0;
    }
    case GlyphKind::Square:
      return px >= g.x0 && px <= g.x1 && py >= g.y0 && py <= g.y1;
    case GlyphKind::Triangle: {
      if (py < g.y0 || py > g.y1) return false;
      const double half_at = (py - g.y0) / (g.y1 - g.y0) * hw;
      return std::abs(px - cx) <= half_at;
    }
    case GlyphKind::Ring: {
      const double dx = (px - cx) / hw, dy = (py - cy) / hh;
      const double r2 = dx * dx + dy * dy;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case GlyphKind::Cross: {
      const bool horizontal = std::abs(py - cy) <= 0.15 * (g.y1 - g.y0) && px >= g.x0 && px <= g.x1;
      const bool vertical = std::abs(px - cx) <= 0.15 * (g.x1 - g.x0) && py >= g.y0 && py <= g.y1;
      return horizontal || vertical;
    }
  }
  return false;
}

Annotation glyph_annotation(const Glyph& g, int size) {
  Annotation a;
  a.class_id = g.class_id;
  a.cx = (g.x0 + g.x1) / 2 / size;
  a.cy = (g.y0 + g.y1) / 2 / size;
  a.w = (g.x1 - g.x0) / size;
  a.h = (g.y1 - g.y0) / size;
  return a;
}

Scene sample_scene(Rng& rng, int classes, int size) {
  if (classes < 1 || classes > 5) throw input_error("synth_shapes: classes must be in [1,5]");
  Scene scene;
  scene.size = size;
  scene.bg_seed = rng.bits();
  const int n_glyphs = rng.uniform_int(1, 3);
  const int lo = std::max(16, int(size * 0.15));
  const int hi = std::max(lo + 2, int(size * 0.4));
  for (int gi = 0; gi < n_glyphs; ++gi) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      Glyph g;
      g.class_id = rng.uniform_int(0, classes - 1);
      // even extents snapped to the pixel grid keep rendered masks tight
      int w = rng.uniform_int(lo / 2, hi / 2) * 2;
      int h = w;
      GlyphKind kind = GlyphKind(g.class_id);
      if (kind == GlyphKind::Triangle || kind == GlyphKind::Cross)
        h = std::clamp(rng.uniform_int(int(w * 0.8), int(w * 1.3)), lo, hi);
      if (w >= size - 4 || h >= size - 4) continue;
      const int x0 = rng.uniform_int(2, size - 2 - w);
      const int y0 = rng.uniform_int(2, size - 2 - h);
      g.x0 = x0;
      g.y0 = y0;
      g.x1 = x0 + w;
      g.y1 = y0 + h;
      for (int c = 0; c < 3; ++c) g.color[c] = uint8_t(rng.uniform_int(110, 255));

      bool overlaps = false;
      BBox cand{(g.x0 + g.x1) / 2, (g.y0 + g.y1) / 2, double(w), double(h), 0, 0.0};
      for (const Glyph& other : scene.glyphs) {
        BBox ob{(other.x0 + other.x1) / 2, (other.y0 + other.y1) / 2, other.x1 - other.x0,
                other.y1 - other.y0, 0, 0.0};
        if (iou(cand, ob) > 0.25) {
          overlaps = true;
          break;
        }
      }
      if (!overlaps) {
        scene.glyphs.push_back(g);
        break;
      }
    }
  }
  return scene;
}

Image rasterize(const Scene& scene) {
  Image img;
  img.w = img.h = scene.size;
  img.rgb.resize(size_t(scene.size) * scene.size * 3);
  Rng bg(scene.bg_seed);
  for (auto& v : img.rgb) v = uint8_t(bg.uniform_int(0, 127));
  for (const Glyph& g : scene.glyphs) {
    const int x_lo = std::max(0, int(std::floor(g.x0)));
    const int x_hi = std::min(scene.size - 1, int(std::ceil(g.x1)));
    const int y_lo = std::max(0, int(std::floor(g.y0)));
    const int y_hi = std::min(scene.size - 1, int(std::ceil(g.y1)));
    for (int y = y_lo; y <= y_hi; ++y)
      for (int x = x_lo; x <= x_hi; ++x)
        if (glyph_covers(g, x + 0.5, y + 0.5)) {
          uint8_t* p = img.px(x, y);
          p[0] = g.color[0];
          p[1] = g.color[1];
          p[2] = g.color[2];
        }
  }
  return img;
}

namespace {

const char* kGlyphNames[5] = {"disk", "square", "triangle", "ring", "cross"};

void write_split(const std::filesystem::path& root, const std::string& split, int count,
                 Rng& rng, int classes, int size) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images" / split);
  fs::create_directories(root / "labels" / split);
  char name[32];
  for (int i = 0; i < count; ++i) {
    std::snprintf(name, sizeof(name), "img_%05d", i);
    Scene scene = sample_scene(rng, classes, size);
    write_ppm(root / "images" / split / (std::string(name) + ".ppm"), rasterize(scene));
    std::ofstream lbl(root / "labels" / split / (std::string(name) + ".txt"));
    for (const Glyph& g : scene.glyphs) {
      Annotation a = glyph_annotation(g, size);
      char line[128];
      std::snprintf(line, sizeof(line), "%d %.6f %.6f %.6f %.6f\n", a.class_id, a.cx, a.cy, a.w,
                    a.h);
      lbl << line;
    }
  }
}

}  // namespace

void synth_shapes(const std::filesystem::path& root, const SynthConfig& cfg) {
  if (cfg.classes < 1 || cfg.classes > 5)
    throw input_error("synth_shapes: classes must be in [1,5]");
  if (cfg.n_train < 0 || cfg.n_val < 0 || cfg.n_test < 0)
    throw input_error("synth_shapes: negative split size");
  std::filesystem::create_directories(root);
  std::ofstream cls(root / "classes.txt");
  for (int c = 0; c < cfg.classes; ++c) cls << kGlyphNames[c] << "\n";

  Rng master(cfg.seed);
  Rng train_rng = master.fork(1), val_rng = master.fork(2), test_rng = master.fork(3);
  write_split(root, "train", cfg.n_train, train_rng, cfg.classes, cfg.size);
  write_split(root, "val", cfg.n_val, val_rng, cfg.classes, cfg.size);
  write_split(root, "test", cfg.n_test, test_rng, cfg.classes, cfg.size);
}

// ----------------------------------------------------------------- batching

std::vector<std::vector<size_t>> batch_indices(size_t n, int batch_size, uint64_t seed,
                                               int epoch, bool shuffle) {
  if (batch_size < 1) throw input_error("batch_indices: batch_size must be >= 1");
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    Rng rng(seed ^ (uint64_t(epoch) + 1) * 0x9E3779B97F4A7C15ull);
    rng.shuffle(order.begin(), order.end());
  }
  std::vector<std::vector<size_t>> batches;
  for (size_t i = 0; i < n; i += size_t(batch_size)) {
    batches.emplace_back(order.begin() + int64_t(i),
                         order.begin() + int64_t(std::min(n, i + size_t(batch_size))));
  }
  return batches;
}

}  // namespace gridsight
