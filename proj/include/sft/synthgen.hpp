#pragma once

#include "sft/common.hpp"
#include "sft/event_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace sft {

/// Synthetic moving-rectangle scene. Trajectory is in units of windows:
/// center(w) = start center + velocity * w + amplitude * sin(2 pi w / period).
struct SynthConfig {
  SensorSize sensor{64, 64};
  std::int64_t T = 200000;
  std::int64_t delta_t = 10000;
  Box start_box{26, 26, 12, 12};
  double vx = 0, vy = 0;
  double amp_x = 0, amp_y = 0;
  double period = 16;
  double edge_rate = 1.0;   // events per boundary pixel per window
  double bg_rate = 0.002;   // events per pixel per window
  std::uint64_t seed = 0;

  int num_windows() const { return sft::num_windows(T, delta_t); }

  Box box_at(int w) const {
    const double phase = 6.283185307179586 * w / period;
    const double cx = start_box.cx() + vx * w + amp_x * std::sin(phase);
    const double cy = start_box.cy() + vy * w + amp_y * std::sin(phase);
    return Box::from_center(cx, cy, start_box.w, start_box.h);
  }
  double velocity_x(int w) const {
    return vx + amp_x * 6.283185307179586 / period * std::cos(6.283185307179586 * w / period);
  }
  double velocity_y(int w) const {
    return vy + amp_y * 6.283185307179586 / period * std::cos(6.283185307179586 * w / period);
  }

  void validate() const {
    if (sensor.height <= 0 || sensor.width <= 0) throw ValidationError("synth: empty sensor");
    if (delta_t <= 0 || T <= 0) throw ValidationError("synth: T and delta_t must be positive");
    if (edge_rate < 0 || bg_rate < 0) throw ValidationError("synth: rates must be non-negative");
    if (!(start_box.w > 0) || !(start_box.h > 0)) throw ValidationError("synth: degenerate start box");
    if (!(period > 0)) throw ValidationError("synth: period must be positive");
    for (int w = 0; w < num_windows(); ++w) {
      const Box b = box_at(w);
      if (b.cx() < 0 || b.cy() < 0 || b.cx() >= sensor.width || b.cy() >= sensor.height)
        throw ValidationError(detail::cat("synth: trajectory leaves the sensor at window ", w));
    }
  }
};

namespace synth_detail {
enum : std::uint64_t { kEdgeStream = 1, kBackgroundStream = 2 };

inline int polarity_from_velocity(double v, bool leading_if_positive, KeyedRng& rng) {
  if (v == 0) return (rng() & 1) ? 1 : -1;
  const bool leading = (v > 0) == leading_if_positive;
  return leading ? 1 : -1;
}

struct PixelRect {
  int x0, y0, x1, y1;  // inclusive
};

inline PixelRect pixel_rect(const Box& b) {
  const int x0 = static_cast<int>(std::lround(b.x));
  const int y0 = static_cast<int>(std::lround(b.y));
  const int x1 = std::max(x0, static_cast<int>(std::lround(b.x2())) - 1);
  const int y1 = std::max(y0, static_cast<int>(std::lround(b.y2())) - 1);
  return {x0, y0, x1, y1};
}
}  // namespace synth_detail

/// Boundary pixels of the rasterised box that fall on the sensor.
inline std::vector<std::pair<int, int>> boundary_pixels(const Box& b, SensorSize sensor) {
  const auto r = synth_detail::pixel_rect(b);
  std::vector<std::pair<int, int>> px;
  for (int y = r.y0; y <= r.y1; ++y) {
    for (int x = r.x0; x <= r.x1; ++x) {
      const bool edge = x == r.x0 || x == r.x1 || y == r.y0 || y == r.y1;
      if (!edge || x < 0 || y < 0 || x >= sensor.width || y >= sensor.height) continue;
      px.emplace_back(x, y);
    }
  }
  return px;
}

inline SequenceRecord generate_sequence(const SynthConfig& cfg) {
  using namespace synth_detail;
  cfg.validate();
  SequenceRecord rec;
  rec.delta_t = cfg.delta_t;
  rec.stream.sensor = cfg.sensor;
  rec.stream.T = cfg.T;
  const int n = cfg.num_windows();
  rec.ground_truth.reserve(n);

  std::vector<EventPoint> window_events;
  for (int w = 0; w < n; ++w) {
    const Box box = cfg.box_at(w);
    rec.ground_truth.push_back(box);
    const std::int64_t t0 = w * cfg.delta_t;
    // last window may be partial and is closed at T
    const std::int64_t span = std::min(cfg.delta_t, cfg.T - t0 + (w == n - 1 ? 1 : 0));
    auto draw_time = [&](KeyedRng& rng) { return t0 + static_cast<std::int64_t>(rng.below(std::uint64_t(span))); };

    window_events.clear();
    if (cfg.edge_rate > 0) {
      const auto r = pixel_rect(box);
      const double vxw = cfg.velocity_x(w), vyw = cfg.velocity_y(w);
      for (auto [x, y] : boundary_pixels(box, cfg.sensor)) {
        KeyedRng rng(hash_key(cfg.seed, kEdgeStream, std::uint64_t(w),
                              std::uint64_t(y) * cfg.sensor.width + std::uint64_t(x)));
        const auto k = rng.poisson(cfg.edge_rate);
        for (std::uint64_t e = 0; e < k; ++e) {
          int p;
          if (x == r.x0 && x != r.x1) p = polarity_from_velocity(vxw, false, rng);
          else if (x == r.x1 && x != r.x0) p = polarity_from_velocity(vxw, true, rng);
          else if (y == r.y0) p = polarity_from_velocity(vyw, false, rng);
          else p = polarity_from_velocity(vyw, true, rng);
          window_events.push_back({draw_time(rng), x, y, p});
        }
      }
    }
    if (cfg.bg_rate > 0) {
      for (int y = 0; y < cfg.sensor.height; ++y) {
        for (int x = 0; x < cfg.sensor.width; ++x) {
          KeyedRng rng(hash_key(cfg.seed, kBackgroundStream, std::uint64_t(w),
                                std::uint64_t(y) * cfg.sensor.width + std::uint64_t(x)));
          const auto k = rng.poisson(cfg.bg_rate);
          for (std::uint64_t e = 0; e < k; ++e) {
            const int p = (rng() & 1) ? 1 : -1;
            window_events.push_back({draw_time(rng), x, y, p});
          }
        }
      }
    }
    std::stable_sort(window_events.begin(), window_events.end(),
                     [](const EventPoint& a, const EventPoint& b) { return a.t < b.t; });
    rec.stream.points.insert(rec.stream.points.end(), window_events.begin(), window_events.end());
  }
  return rec;
}

/// Scene-level knobs for drawing a dataset of random sequences.
struct SynthDatasetConfig {
  SensorSize sensor{64, 64};
  std::int64_t T = 200000;
  std::int64_t delta_t = 10000;
  int num_sequences = 20;
  double box_min = 10, box_max = 16;
  double speed_max = 1.0;       // pixels per window
  double amplitude_max = 3.0;   // pixels
  double edge_rate = 1.0;
  double bg_rate = 0.002;
};

/// Deterministic per-sequence config; rejects trajectories that leave the sensor.
inline SynthConfig random_synth_config(const SynthDatasetConfig& ds, int index, std::uint64_t seed) {
  KeyedRng rng(hash_key(seed, 0x5e9ULL, std::uint64_t(index)));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    SynthConfig c;
    c.sensor = ds.sensor;
    c.T = ds.T;
    c.delta_t = ds.delta_t;
    c.edge_rate = ds.edge_rate;
    c.bg_rate = ds.bg_rate;
    c.seed = hash_key(seed, std::uint64_t(index));
    const double w = rng.uniform(ds.box_min, ds.box_max);
    const double h = rng.uniform(ds.box_min, ds.box_max);
    const double cx = rng.uniform(w / 2 + 1, ds.sensor.width - w / 2 - 1);
    const double cy = rng.uniform(h / 2 + 1, ds.sensor.height - h / 2 - 1);
    c.start_box = Box::from_center(cx, cy, w, h);
    c.vx = rng.uniform(-ds.speed_max, ds.speed_max);
    c.vy = rng.uniform(-ds.speed_max, ds.speed_max);
    c.amp_x = rng.uniform(0, ds.amplitude_max);
    c.amp_y = rng.uniform(0, ds.amplitude_max);
    c.period = rng.uniform(8, 24);
    bool inside = true;
    for (int k = 0; k < c.num_windows() && inside; ++k) {
      const Box b = c.box_at(k);
      inside = b.x >= 0 && b.y >= 0 && b.x2() <= ds.sensor.width && b.y2() <= ds.sensor.height;
    }
    if (inside) return c;
  }
  throw ValidationError("synth: could not place a trajectory inside the sensor");
}

}  // namespace sft
