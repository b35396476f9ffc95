#include "gridsight/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "gridsight/tensor.hpp"

namespace gridsight {

double precision_metric(int64_t tp, int64_t fp) {
  if (tp + fp == 0) return 0.0;
  return double(tp) / double(tp + fp);
}

double recall_metric(int64_t tp, int64_t fn) {
  if (tp + fn == 0) return 1.0;
  return double(tp) / double(tp + fn);
}

MatchResult match_detections(const std::vector<std::vector<BBox>>& dets,
                             const std::vector<std::vector<BBox>>& gts, double iou_thresh,
                             int num_classes) {
  if (dets.size() != gts.size())
    throw input_error("match_detections: " + std::to_string(dets.size()) +
                      " detection lists vs " + std::to_string(gts.size()) + " truth lists");
  for (const auto& img : dets)
    for (const auto& d : img)
      if (d.class_id < 0 || d.class_id >= num_classes)
        throw input_error("match_detections: detection class " + std::to_string(d.class_id) +
                          " outside [0," + std::to_string(num_classes) + ")");
  for (const auto& img : gts)
    for (const auto& g : img)
      if (g.class_id < 0 || g.class_id >= num_classes)
        throw input_error("match_detections: ground-truth class " + std::to_string(g.class_id) +
                          " outside [0," + std::to_string(num_classes) + ")");

  MatchResult result;
  for (size_t img = 0; img < dets.size(); ++img) {
    std::vector<char> gt_used(gts[img].size(), 0);
    for (int cls = 0; cls < num_classes; ++cls) {
      std::vector<size_t> order;
      for (size_t i = 0; i < dets[img].size(); ++i)
        if (dets[img][i].class_id == cls) order.push_back(i);
      std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return dets[img][a].score > dets[img][b].score;
      });
      for (size_t di : order) {
        const BBox& d = dets[img][di];
        double best = 0.0;
        int best_gt = -1;
        for (size_t gi = 0; gi < gts[img].size(); ++gi) {
          if (gt_used[gi] || gts[img][gi].class_id != cls) continue;
          double v = iou(d, gts[img][gi]);
          if (v > best) {
            best = v;
            best_gt = int(gi);
          }
        }
        MatchRecord rec;
        rec.image_id = int(img);
        rec.det = d;
        if (best_gt >= 0 && best >= iou_thresh) {
          rec.is_tp = true;
          rec.matched_gt = best_gt;
          gt_used[size_t(best_gt)] = 1;
        }
        result.records.push_back(rec);
      }
    }
    for (char used : gt_used)
      if (!used) ++result.fn;
  }
  return result;
}

double average_precision(std::vector<MatchRecord> records, int64_t n_gt) {
  if (n_gt == 0) return 0.0;
  std::stable_sort(records.begin(), records.end(),
                   [](const MatchRecord& a, const MatchRecord& b) {
                     return a.det.score > b.det.score;
                   });
  const size_t n = records.size();
  std::vector<double> prec(n), rec(n);
  int64_t tp = 0;
  for (size_t i = 0; i < n; ++i) {
    if (records[i].is_tp) ++tp;
    prec[i] = double(tp) / double(i + 1);
    rec[i] = double(tp) / double(n_gt);
  }
  // precision envelope from the right
  for (size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double acc = 0.0;
  size_t cursor = 0;
  for (int r = 0; r <= 100; ++r) {
    const double want = double(r) / 100.0;
    while (cursor < n && rec[cursor] < want) ++cursor;
    if (cursor < n) acc += prec[cursor];
  }
  return acc / 101.0;
}

namespace {

int64_t count_gt(const std::vector<std::vector<BBox>>& gts, int cls) {
  int64_t n = 0;
  for (const auto& img : gts)
    for (const auto& g : img)
      if (g.class_id == cls) ++n;
  return n;
}

double class_ap(const MatchResult& matches, const std::vector<std::vector<BBox>>& gts,
                int cls) {
  std::vector<MatchRecord> recs;
  for (const auto& r : matches.records)
    if (r.det.class_id == cls) recs.push_back(r);
  return average_precision(std::move(recs), count_gt(gts, cls));
}

}  // namespace

double map_at(const std::vector<std::vector<BBox>>& dets,
              const std::vector<std::vector<BBox>>& gts, double iou_thresh, int num_classes) {
  MatchResult matches = match_detections(dets, gts, iou_thresh, num_classes);
  double acc = 0.0;
  int n_classes = 0;
  for (int cls = 0; cls < num_classes; ++cls) {
    if (count_gt(gts, cls) == 0) continue;
    acc += class_ap(matches, gts, cls);
    ++n_classes;
  }
  return n_classes == 0 ? 0.0 : acc / n_classes;
}

double map_range(const std::vector<std::vector<BBox>>& dets,
                 const std::vector<std::vector<BBox>>& gts, int num_classes) {
  double acc = 0.0;
  for (int t = 0; t < 10; ++t) acc += map_at(dets, gts, 0.50 + 0.05 * t, num_classes);
  return acc / 10.0;
}

EvalReport evaluate_detections(const std::vector<std::vector<BBox>>& dets,
                               const std::vector<std::vector<BBox>>& gts, int num_classes) {
  EvalReport report;
  for (const auto& img : gts) report.total_gt += int64_t(img.size());
  for (const auto& img : dets) report.total_det += int64_t(img.size());

  MatchResult m50 = match_detections(dets, gts, 0.5, num_classes);

  // F1-maximizing confidence threshold. Greedy matching is prefix-stable in
  // score order, so cumulative TP/FP at each cut equal a re-match of the
  // dets above the cut.
  std::vector<MatchRecord> sorted = m50.records;
  std::stable_sort(sorted.begin(), sorted.end(), [](const MatchRecord& a, const MatchRecord& b) {
    return a.det.score > b.det.score;
  });
  int64_t best_tp = 0, best_fp = 0;
  double best_f1 = 0.0, best_thr = 1.0;
  int64_t tp = 0, fp = 0;
  for (size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i].is_tp) ++tp;
    else ++fp;
    if (i + 1 < sorted.size() && sorted[i + 1].det.score == sorted[i].det.score) continue;
    const int64_t fn = report.total_gt - tp;
    const double denom = double(2 * tp + fp + fn);
    const double f1 = denom == 0.0 ? 0.0 : 2.0 * double(tp) / denom;
    if (f1 > best_f1) {
      best_f1 = f1;
      best_thr = sorted[i].det.score;
      best_tp = tp;
      best_fp = fp;
    }
  }
  report.conf_threshold = best_thr;
  report.f1 = best_f1;
  report.precision = precision_metric(best_tp, best_fp);
  report.recall = recall_metric(best_tp, report.total_gt - best_tp);

  // per-class APs across the 10-threshold range
  std::vector<MatchResult> per_thresh;
  per_thresh.push_back(std::move(m50));
  for (int t = 1; t < 10; ++t)
    per_thresh.push_back(match_detections(dets, gts, 0.50 + 0.05 * t, num_classes));

  int counted = 0;
  for (int cls = 0; cls < num_classes; ++cls) {
    ClassEval ce;
    ce.class_id = cls;
    ce.n_gt = count_gt(gts, cls);
    ce.ap50 = class_ap(per_thresh[0], gts, cls);
    double acc = 0.0;
    for (const auto& mt : per_thresh) acc += class_ap(mt, gts, cls);
    ce.ap50_95 = acc / 10.0;
    for (const auto& r : per_thresh[0].records) {
      if (r.det.class_id != cls || r.det.score < report.conf_threshold) continue;
      if (r.is_tp) ++ce.tp;
      else ++ce.fp;
    }
    ce.fn = ce.n_gt - ce.tp;
    ce.precision = precision_metric(ce.tp, ce.fp);
    ce.recall = recall_metric(ce.tp, ce.fn);
    report.per_class.push_back(ce);
    if (ce.n_gt > 0) {
      report.map50 += ce.ap50;
      report.map50_95 += ce.ap50_95;
      ++counted;
    }
  }
  if (counted > 0) {
    report.map50 /= counted;
    report.map50_95 /= counted;
  }
  return report;
}

}  // namespace gridsight
