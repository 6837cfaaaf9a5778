#pragma once

#include "sft/common.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace sft {

struct SensorSize {
  int height = 0;
  int width = 0;
  friend bool operator==(const SensorSize&, const SensorSize&) = default;
};

struct EventPoint {
  std::int64_t t = 0;  // microseconds
  int x = 0;
  int y = 0;
  int p = 1;  // polarity, -1 or +1
  friend bool operator==(const EventPoint&, const EventPoint&) = default;
};

struct EventStream {
  std::vector<EventPoint> points;
  std::int64_t T = 0;
  SensorSize sensor;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }

  void validate() const {
    for (std::size_t i = 0; i < points.size(); ++i) {
      const auto& e = points[i];
      if (e.p != 1 && e.p != -1)
        throw ValidationError(detail::cat("event ", i, ": polarity ", e.p, " not in {-1,1}"));
      if (e.x < 0 || e.y < 0 || e.x >= sensor.width || e.y >= sensor.height)
        throw ValidationError(detail::cat("event ", i, ": coordinate (", e.x, ",", e.y,
                                          ") outside sensor ", sensor.height, "x", sensor.width));
      if (e.t < 0 || e.t > T)
        throw ValidationError(detail::cat("event ", i, ": timestamp ", e.t, " outside [0,", T, "]"));
      if (i > 0 && points[i - 1].t > e.t)
        throw ValidationError(detail::cat("event ", i, ": unsorted timestamps"));
    }
  }

  /// Events with t in [t0, t1), timestamps kept absolute.
  EventStream slice(std::int64_t t0, std::int64_t t1) const {
    EventStream out{{}, T, sensor};
    auto lo = std::lower_bound(points.begin(), points.end(), t0,
                               [](const EventPoint& e, std::int64_t t) { return e.t < t; });
    auto hi = std::lower_bound(lo, points.end(), t1,
                               [](const EventPoint& e, std::int64_t t) { return e.t < t; });
    out.points.assign(lo, hi);
    return out;
  }
};

/// C x H x W real image, row-major per channel.
struct Image {
  int channels = 0, height = 0, width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w) : channels(c), height(h), width(w), data(std::size_t(c) * h * w, 0.f) {}

  float& at(int c, int y, int x) { return data[(std::size_t(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(std::size_t(c) * height + y) * width + x]; }
};

inline constexpr int kFrameChannels = 3;

struct FrameStack {
  int n = 0, channels = kFrameChannels, height = 0, width = 0;
  std::int64_t delta_t = 0;
  std::vector<float> data;

  float& at(int i, int c, int y, int x) {
    return data[((std::size_t(i) * channels + c) * height + y) * width + x];
  }
  float at(int i, int c, int y, int x) const {
    return data[((std::size_t(i) * channels + c) * height + y) * width + x];
  }
  Image frame(int i) const {
    Image img(channels, height, width);
    const std::size_t sz = std::size_t(channels) * height * width;
    std::copy_n(data.begin() + std::ptrdiff_t(sz * i), sz, img.data.begin());
    return img;
  }
};

inline int num_windows(std::int64_t T, std::int64_t delta_t) {
  if (delta_t <= 0) throw ArgumentError("delta_t must be positive");
  return static_cast<int>((T + delta_t - 1) / delta_t);
}

/// Half-open windows, with t == T folded into the last one.
inline int window_of(std::int64_t t, std::int64_t delta_t, int n_windows) {
  const auto w = static_cast<int>(t / delta_t);
  return std::min(w, n_windows - 1);
}

inline FrameStack stack_events(const EventStream& stream, std::int64_t delta_t) {
  if (delta_t <= 0) throw ArgumentError("stack_events: delta_t must be positive");
  FrameStack fs;
  fs.n = num_windows(stream.T, delta_t);
  fs.height = stream.sensor.height;
  fs.width = stream.sensor.width;
  fs.delta_t = delta_t;
  fs.data.assign(std::size_t(fs.n) * fs.channels * fs.height * fs.width, 0.f);
  for (const auto& e : stream.points) {
    const int i = window_of(e.t, delta_t, fs.n);
    fs.at(i, e.p > 0 ? 0 : 1, e.y, e.x) += 1.f;
    // points are time-ordered, so the last write is the most recent event
    fs.at(i, 2, e.y, e.x) = static_cast<float>(double(e.t - i * delta_t) / double(delta_t));
  }
  return fs;
}

// ---------------------------------------------------------------------------
// Event file I/O

namespace detail {
inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view field, std::size_t line_no) {
  field = trim(field);
  T v{};
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc{} || ptr != field.data() + field.size())
    throw ParseError(cat("line ", line_no, ": malformed field '", field, "'"));
  return v;
}
}  // namespace detail

/// Parses "t,x,y,p" lines. T defaults to the last timestamp unless given.
inline EventStream parse_events(std::istream& in, SensorSize sensor, std::int64_t T = -1) {
  EventStream s;
  s.sensor = sensor;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto v = detail::trim(line);
    if (v.empty() || v.front() == '#') continue;
    std::string_view f[4];
    int nf = 0;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= v.size(); ++i) {
      if (i == v.size() || v[i] == ',') {
        if (nf == 4) throw ParseError(detail::cat("line ", line_no, ": expected 4 fields"));
        f[nf++] = v.substr(start, i - start);
        start = i + 1;
      }
    }
    if (nf != 4) throw ParseError(detail::cat("line ", line_no, ": expected 4 fields, got ", nf));
    EventPoint e;
    e.t = detail::parse_number<std::int64_t>(f[0], line_no);
    e.x = detail::parse_number<int>(f[1], line_no);
    e.y = detail::parse_number<int>(f[2], line_no);
    e.p = detail::parse_number<int>(f[3], line_no);
    if (e.p != 1 && e.p != -1)
      throw ValidationError(detail::cat("line ", line_no, ": polarity ", e.p, " not in {-1,1}"));
    if (e.x < 0 || e.y < 0 || e.x >= sensor.width || e.y >= sensor.height)
      throw ValidationError(detail::cat("line ", line_no, ": coordinate out of range"));
    if (e.t < 0) throw ValidationError(detail::cat("line ", line_no, ": negative timestamp"));
    if (!s.points.empty() && s.points.back().t > e.t)
      throw ValidationError(detail::cat("line ", line_no, ": unsorted timestamps"));
    s.points.push_back(e);
  }
  const std::int64_t last = s.points.empty() ? 0 : s.points.back().t;
  if (T >= 0) {
    if (last > T) throw ValidationError(detail::cat("timestamp ", last, " exceeds T=", T));
    s.T = T;
  } else {
    s.T = last;
  }
  return s;
}

inline EventStream parse_events(const std::filesystem::path& path, SensorSize sensor,
                                std::int64_t T = -1) {
  std::ifstream in(path);
  if (!in) throw ParseError(detail::cat("cannot open ", path.string()));
  return parse_events(in, sensor, T);
}

inline void write_events(std::ostream& out, const EventStream& s) {
  for (const auto& e : s.points) out << e.t << ',' << e.x << ',' << e.y << ',' << e.p << '\n';
}

// ---------------------------------------------------------------------------
// Cropping

/// Maps between sensor pixels and crop pixels: crop = (sensor - origin) * scale.
struct CropTransform {
  double origin_x = 0, origin_y = 0;
  double scale = 1;  // output pixels per sensor pixel
  int out_size = 0;

  Box to_crop(const Box& b) const {
    return {(b.x - origin_x) * scale, (b.y - origin_y) * scale, b.w * scale, b.h * scale};
  }
  Box to_sensor(const Box& b) const {
    return {b.x / scale + origin_x, b.y / scale + origin_y, b.w / scale, b.h / scale};
  }
  /// Crop-normalized ([0,1] over the crop) to sensor pixels.
  Box normalized_to_sensor(const Box& b) const {
    const double s = out_size;
    return to_sensor({b.x * s, b.y * s, b.w * s, b.h * s});
  }
  Box sensor_to_normalized(const Box& b) const {
    const Box c = to_crop(b);
    const double s = out_size;
    return {c.x / s, c.y / s, c.w / s, c.h / s};
  }
};

struct Crop {
  Image image;
  CropTransform transform;
};

/// Square crop of side context_factor * sqrt(w h) centred on the box, zero padded,
/// bilinearly resized (half-pixel centres) to out_size.
inline Crop crop_region(const Image& frame, const Box& box, double context_factor, int out_size) {
  if (!(box.w > 0) || !(box.h > 0))
    throw ValidationError(detail::cat("crop_region: degenerate box w=", box.w, " h=", box.h));
  if (!(context_factor > 0)) throw ArgumentError("crop_region: context_factor must be positive");
  if (out_size <= 0) throw ArgumentError("crop_region: out_size must be positive");

  const double side = context_factor * std::sqrt(box.w * box.h);
  Crop crop;
  crop.transform.origin_x = box.cx() - 0.5 * side;
  crop.transform.origin_y = box.cy() - 0.5 * side;
  crop.transform.scale = out_size / side;
  crop.transform.out_size = out_size;
  crop.image = Image(frame.channels, out_size, out_size);

  const double step = side / out_size;
  auto sample_axis = [&](int u, double origin, int& i0, double& frac) {
    const double src = origin + (u + 0.5) * step - 0.5;
    const double fl = std::floor(src);
    i0 = static_cast<int>(fl);
    frac = src - fl;
  };
  for (int v = 0; v < out_size; ++v) {
    int y0;
    double fy;
    sample_axis(v, crop.transform.origin_y, y0, fy);
    for (int u = 0; u < out_size; ++u) {
      int x0;
      double fx;
      sample_axis(u, crop.transform.origin_x, x0, fx);
      const int xs[2] = {x0, x0 + 1};
      const int ys[2] = {y0, y0 + 1};
      const double wx[2] = {1 - fx, fx};
      const double wy[2] = {1 - fy, fy};
      for (int c = 0; c < frame.channels; ++c) {
        double acc = 0;
        for (int a = 0; a < 2; ++a) {
          if (ys[a] < 0 || ys[a] >= frame.height || wy[a] == 0) continue;
          for (int b = 0; b < 2; ++b) {
            if (xs[b] < 0 || xs[b] >= frame.width || wx[b] == 0) continue;
            acc += wy[a] * wx[b] * frame.at(c, ys[a], xs[b]);
          }
        }
        crop.image.at(c, v, u) = static_cast<float>(acc);
      }
    }
  }
  return crop;
}

// ---------------------------------------------------------------------------
// Sequence directory: events.csv, groundtruth.txt, meta.cfg

struct SequenceRecord {
  EventStream stream;
  std::int64_t delta_t = 0;
  std::vector<Box> ground_truth;
  std::vector<std::string> attributes;

  int num_windows() const { return sft::num_windows(stream.T, delta_t); }

  void validate() const {
    stream.validate();
    const int n = num_windows();
    if (static_cast<int>(ground_truth.size()) != n)
      throw ValidationError(detail::cat("ground truth has ", ground_truth.size(), " boxes, expected ", n));
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
      const Box& b = ground_truth[i];
      if (!(b.w > 0) || !(b.h > 0))
        throw ValidationError(detail::cat("ground truth box ", i, " is degenerate"));
      if (b.x2() <= 0 || b.y2() <= 0 || b.x >= stream.sensor.width || b.y >= stream.sensor.height)
        throw ValidationError(detail::cat("ground truth box ", i, " does not intersect the sensor"));
    }
  }
};

/// key=value lines, '#' comments, optional [section] headers (flattened away).
inline std::map<std::string, std::string> read_key_values(std::istream& in, const std::string& what) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto v = detail::trim(line);
    if (v.empty() || v.front() == '#' || v.front() == '[') continue;
    const auto eq = v.find('=');
    if (eq == std::string_view::npos)
      throw ParseError(detail::cat(what, " line ", line_no, ": expected key=value"));
    kv[std::string(detail::trim(v.substr(0, eq)))] = std::string(detail::trim(v.substr(eq + 1)));
  }
  return kv;
}

inline SequenceRecord load_sequence(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream meta_in(dir / "meta.cfg");
  if (!meta_in) throw ParseError(detail::cat("missing ", (dir / "meta.cfg").string()));
  const auto meta = read_key_values(meta_in, "meta.cfg");
  auto need = [&](const char* key) -> std::int64_t {
    auto it = meta.find(key);
    if (it == meta.end()) throw ParseError(detail::cat("meta.cfg: missing key ", key));
    return detail::parse_number<std::int64_t>(it->second, 0);
  };
  SensorSize sensor{static_cast<int>(need("sensor_h")), static_cast<int>(need("sensor_w"))};
  SequenceRecord rec;
  rec.delta_t = need("delta_t");
  rec.stream = parse_events(dir / "events.csv", sensor, need("T"));
  if (auto it = meta.find("attributes"); it != meta.end() && !it->second.empty()) {
    std::stringstream ss(it->second);
    std::string tag;
    while (std::getline(ss, tag, ';'))
      if (!tag.empty()) rec.attributes.push_back(tag);
  }

  std::ifstream gt_in(dir / "groundtruth.txt");
  if (!gt_in) throw ParseError(detail::cat("missing ", (dir / "groundtruth.txt").string()));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(gt_in, line)) {
    ++line_no;
    auto v = detail::trim(line);
    if (v.empty() || v.front() == '#') continue;
    double f[4];
    int nf = 0;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= v.size(); ++i) {
      if (i == v.size() || v[i] == ',') {
        if (nf == 4) throw ParseError(detail::cat("groundtruth line ", line_no, ": expected 4 fields"));
        f[nf++] = detail::parse_number<double>(v.substr(start, i - start), line_no);
        start = i + 1;
      }
    }
    if (nf != 4) throw ParseError(detail::cat("groundtruth line ", line_no, ": expected 4 fields"));
    rec.ground_truth.push_back({f[0], f[1], f[2], f[3]});
  }
  rec.validate();
  return rec;
}

inline void save_sequence(const std::filesystem::path& dir, const SequenceRecord& rec) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "events.csv");
    write_events(out, rec.stream);
  }
  {
    std::ofstream out(dir / "groundtruth.txt");
    out.precision(17);
    for (const auto& b : rec.ground_truth) out << b.x << ',' << b.y << ',' << b.w << ',' << b.h << '\n';
  }
  std::ofstream out(dir / "meta.cfg");
  out << "sensor_h=" << rec.stream.sensor.height << '\n'
      << "sensor_w=" << rec.stream.sensor.width << '\n'
      << "T=" << rec.stream.T << '\n'
      << "delta_t=" << rec.delta_t << '\n';
  if (!rec.attributes.empty()) {
    out << "attributes=";
    for (std::size_t i = 0; i < rec.attributes.size(); ++i) out << (i ? ";" : "") << rec.attributes[i];
    out << '\n';
  }
}

}  // namespace sft
