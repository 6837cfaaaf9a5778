#pragma once

// Tracking loop, SR/PR/NPR metrics, result files and latency benchmarking.

#include "sft/common.hpp"
#include "sft/event_io.hpp"
#include "sft/head.hpp"
#include "sft/pipeline.hpp"
#include "sft/tracker.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace sft {

// ---------------------------------------------------------------------------
// Tracking

struct TrackRun {
  int k = 1;                            // outputs per window
  std::vector<Box> boxes;               // sensor pixels, N*k entries
  std::vector<std::int64_t> t_out_us;   // stream time of each output
  std::vector<double> latency_us;       // wall clock per output
  std::vector<std::uint64_t> flops;     // floating-point operations per output

  /// Last output of each window.
  std::vector<Box> window_boxes() const {
    std::vector<Box> out;
    for (std::size_t i = std::size_t(k) - 1; i < boxes.size(); i += std::size_t(k)) out.push_back(boxes[i]);
    return out;
  }
};

namespace eval_detail {
inline double elapsed_us(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
}
inline Box sanitize(Box b) {
  b.w = std::max(b.w, 1e-3);
  b.h = std::max(b.h, 1e-3);
  return b;
}
}  // namespace eval_detail

/// Tracks a sequence from its first ground-truth box. Window 0 reports the initial box.
/// Slow: frame w + graph of window w. Fast: visual tokens of frame w-1 gated by k cumulative
/// sub-window graphs of window w. The search crop is centred on the previous estimate.
template <typename S>
TrackRun track_sequence(const Tracker<S>& model, const PreparedSequence& seq, int k = 1) {
  const auto& cfg = model.config();
  const bool fast = model.kind() == TrackerKind::fast;
  if (k < 1) throw ArgumentError(detail::cat("k must be >= 1, got ", k));
  if (!fast) k = 1;
  TrackRun run;
  run.k = k;
  const auto& rec = seq.record;
  const int n = seq.num_windows();
  const Box init = rec.ground_truth.at(0);
  const Image tmpl = template_crop(seq, 0, init, cfg).image;
  for (int j = 1; j <= k; ++j) {
    run.boxes.push_back(init);
    run.t_out_us.push_back(std::int64_t(j) * rec.delta_t / k);
    run.latency_us.push_back(0);
    run.flops.push_back(0);
  }
  Box prev = init;
  for (int w = 1; w < n; ++w) {
    const std::int64_t t0 = std::int64_t(w) * rec.delta_t;
    if (!fast) {
      const auto start = std::chrono::steady_clock::now();
      FlopCounter fc;
      const Crop sc = search_crop(seq, w, prev, cfg);
      const auto graph = window_graph(window_events(rec, w), cfg, &fc);
      const auto out = model.forward(tmpl, sc.image, graph ? &*graph : nullptr, nullptr, &fc);
      const Box b = eval_detail::sanitize(sc.transform.normalized_to_sensor(decode_box(out.maps).box));
      run.latency_us.push_back(eval_detail::elapsed_us(start));
      run.boxes.push_back(b);
      run.t_out_us.push_back(t0 + rec.delta_t);
      run.flops.push_back(fc.total);
      prev = b;
      continue;
    }
    const auto start = std::chrono::steady_clock::now();
    FlopCounter vfc;
    const Crop sc = search_crop(seq, w - 1, prev, cfg);
    const Mat<S> cached = model.visual_tokens(tmpl, sc.image, &vfc);
    const double visual_us = eval_detail::elapsed_us(start);
    std::vector<std::uint64_t> inc;
    std::vector<double> lat;
    const auto maps = accumulate_and_track(model, cached, window_events(rec, w), k, &inc, &lat);
    for (int j = 0; j < k; ++j) {
      const Box b = eval_detail::sanitize(sc.transform.normalized_to_sensor(decode_box(maps[std::size_t(j)]).box));
      run.latency_us.push_back(lat[std::size_t(j)] + (j == 0 ? visual_us : 0.0));
      run.boxes.push_back(b);
      run.t_out_us.push_back(t0 + std::int64_t(j + 1) * rec.delta_t / k);
      run.flops.push_back(inc[std::size_t(j)] + (j == 0 ? vfc.total : 0));
    }
    prev = run.boxes.back();
  }
  return run;
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double sr = 0, pr = 0, npr = 0;
  std::vector<double> success_curve;    // 21 points, IoU thresholds i/20
  std::vector<double> precision_curve;  // 51 points, pixel thresholds 0..50
  std::vector<double> norm_curve;       // 51 points, thresholds i/100
};

inline constexpr int kSuccessPoints = 21;
inline constexpr int kNormPoints = 51;
inline constexpr double kPrecisionPixels = 20.0;

inline double success_threshold(int i) { return i / 20.0; }
inline double norm_threshold(int i) { return i / 100.0; }

/// Metrics from per-window IoU, centre error (pixels) and size-normalised centre error.
/// IoU threshold 0 counts IoU > 0 only; every other comparison is inclusive.
inline Metrics metrics_from_errors(const std::vector<double>& ious, const std::vector<double>& center_err,
                                   const std::vector<double>& norm_err) {
  const std::size_t n = ious.size();
  if (center_err.size() != n || norm_err.size() != n) throw ArgumentError("metrics: per-window vectors differ in size");
  if (n == 0) throw ArgumentError("metrics: no windows");
  Metrics m;
  for (int i = 0; i < kSuccessPoints; ++i) {
    const double t = success_threshold(i);
    std::size_t pass = 0;
    for (double v : ious) pass += (i == 0 ? v > 0 : v >= t) ? 1 : 0;
    m.success_curve.push_back(double(pass) / double(n));
  }
  for (int i = 0; i <= 50; ++i) {
    std::size_t pass = 0;
    for (double v : center_err) pass += v <= double(i) ? 1 : 0;
    m.precision_curve.push_back(double(pass) / double(n));
  }
  for (int i = 0; i < kNormPoints; ++i) {
    const double t = norm_threshold(i);
    std::size_t pass = 0;
    for (double v : norm_err) pass += v <= t ? 1 : 0;
    m.norm_curve.push_back(double(pass) / double(n));
  }
  double s = 0;
  for (double v : m.success_curve) s += v;
  m.sr = 100.0 * s / kSuccessPoints;
  std::size_t pr_pass = 0;
  for (double v : center_err) pr_pass += v <= kPrecisionPixels ? 1 : 0;
  m.pr = 100.0 * double(pr_pass) / double(n);
  s = 0;
  for (double v : m.norm_curve) s += v;
  m.npr = 100.0 * s / kNormPoints;
  return m;
}

inline double center_error(const Box& p, const Box& g) { return std::hypot(p.cx() - g.cx(), p.cy() - g.cy()); }
inline double normalized_center_error(const Box& p, const Box& g) {
  return std::hypot((p.cx() - g.cx()) / g.w, (p.cy() - g.cy()) / g.h);
}

/// Per-window predictions against per-window ground truth.
inline Metrics compute_metrics(const std::vector<Box>& pred, const std::vector<Box>& gt) {
  if (pred.size() != gt.size())
    throw ArgumentError(detail::cat("metrics: ", pred.size(), " predictions for ", gt.size(), " windows"));
  std::vector<double> ious, ce, ne;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ious.push_back(iou(pred[i], gt[i]));
    ce.push_back(center_error(pred[i], gt[i]));
    ne.push_back(normalized_center_error(pred[i], gt[i]));
  }
  return metrics_from_errors(ious, ce, ne);
}

/// Fast runs are scored by the last output of each window.
inline Metrics compute_metrics(const TrackRun& run, const SequenceRecord& rec) {
  if (run.boxes.size() != std::size_t(rec.num_windows()) * std::size_t(run.k))
    throw ArgumentError(detail::cat("metrics: ", run.boxes.size(), " outputs for ", rec.num_windows(), " windows x k=",
                                    run.k));
  return compute_metrics(run.window_boxes(), rec.ground_truth);
}

inline double mean_iou(const std::vector<Box>& pred, const std::vector<Box>& gt) {
  if (pred.size() != gt.size() || pred.empty()) throw ArgumentError("mean_iou: size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += iou(pred[i], gt[i]);
  return s / double(pred.size());
}

// ---------------------------------------------------------------------------
// Files

inline void write_results(std::ostream& os, const TrackRun& run) {
  os.precision(10);
  for (std::size_t i = 0; i < run.boxes.size(); ++i) {
    const Box& b = run.boxes[i];
    os << b.x << ',' << b.y << ',' << b.w << ',' << b.h << ',' << run.t_out_us[i] << '\n';
  }
}

/// Reads "x,y,w,h,t_out_us" lines.
inline TrackRun read_results(std::istream& in, int k) {
  TrackRun run;
  run.k = k;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto v = detail::trim(line);
    if (v.empty() || v.front() == '#') continue;
    std::vector<std::string> f;
    std::string cur;
    for (char ch : v) {
      if (ch == ',') {
        f.push_back(cur);
        cur.clear();
      } else {
        cur += ch;
      }
    }
    f.push_back(cur);
    if (f.size() != 5) throw ParseError(detail::cat("results line ", line_no, ": expected 5 fields"));
    try {
      run.boxes.push_back({std::stod(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3])});
      run.t_out_us.push_back(std::stoll(f[4]));
    } catch (const std::exception&) {
      throw ParseError(detail::cat("results line ", line_no, ": bad number"));
    }
  }
  return run;
}

inline void write_curves(std::ostream& os, const Metrics& m) {
  os << "curve,threshold,value\n";
  for (int i = 0; i < kSuccessPoints; ++i) os << "success," << success_threshold(i) << ',' << m.success_curve[std::size_t(i)] << '\n';
  for (int i = 0; i <= 50; ++i) os << "precision," << i << ',' << m.precision_curve[std::size_t(i)] << '\n';
  for (int i = 0; i < kNormPoints; ++i) os << "norm_precision," << norm_threshold(i) << ',' << m.norm_curve[std::size_t(i)] << '\n';
}

struct SequenceScore {
  std::string name;
  std::vector<std::string> attributes;
  Metrics metrics;
  double fps = 0;
};

/// Per-sequence scores, their mean, and means grouped by attribute tag.
inline nlohmann::json summary_json(const std::vector<SequenceScore>& scores) {
  nlohmann::json j;
  auto entry = [](double sr, double pr, double npr, double fps, std::size_t n) {
    return nlohmann::json{{"SR", sr}, {"PR", pr}, {"NPR", npr}, {"FPS", fps}, {"sequences", n}};
  };
  double sr = 0, pr = 0, npr = 0, fps = 0;
  std::map<std::string, std::array<double, 5>> tags;
  for (const auto& s : scores) {
    j["sequences"][s.name] = entry(s.metrics.sr, s.metrics.pr, s.metrics.npr, s.fps, 1);
    sr += s.metrics.sr;
    pr += s.metrics.pr;
    npr += s.metrics.npr;
    fps += s.fps;
    for (const auto& a : s.attributes) {
      auto& t = tags[a];
      t[0] += s.metrics.sr;
      t[1] += s.metrics.pr;
      t[2] += s.metrics.npr;
      t[3] += s.fps;
      t[4] += 1;
    }
  }
  const double n = std::max<double>(1, double(scores.size()));
  j["overall"] = entry(sr / n, pr / n, npr / n, fps / n, scores.size());
  for (const auto& [tag, t] : tags) j["attributes"][tag] = entry(t[0] / t[4], t[1] / t[4], t[2] / t[4], t[3] / t[4], std::size_t(t[4]));
  return j;
}

// ---------------------------------------------------------------------------
// Latency

struct LatencyReport {
  std::size_t outputs = 0;
  double median_us = 0, p95_us = 0;
  double outputs_per_second = 0;
  double flops_per_output = 0;
};

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const auto lo = std::size_t(std::floor(pos));
  const auto hi = std::min(v.size() - 1, lo + 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

/// Runs the sequence repeatedly until `warmup` windows have been discarded, then reports
/// statistics over one full pass (window 0 carries no model work and is excluded).
template <typename S>
LatencyReport bench_latency(const Tracker<S>& model, const PreparedSequence& seq, int k, int warmup = 10) {
  int discarded = 0;
  while (discarded < warmup) {
    track_sequence(model, seq, k);
    discarded += std::max(1, seq.num_windows() - 1);
  }
  const TrackRun run = track_sequence(model, seq, k);
  std::vector<double> lat(run.latency_us.begin() + run.k, run.latency_us.end());
  LatencyReport r;
  r.outputs = lat.size();
  r.median_us = percentile(lat, 0.5);
  r.p95_us = percentile(lat, 0.95);
  double total_us = 0;
  for (double v : lat) total_us += v;
  r.outputs_per_second = total_us > 0 ? 1e6 * double(lat.size()) / total_us : 0;
  double fl = 0;
  for (std::size_t i = std::size_t(run.k); i < run.flops.size(); ++i) fl += double(run.flops[i]);
  r.flops_per_output = lat.empty() ? 0 : fl / double(lat.size());
  return r;
}

}  // namespace sft
