#pragma once

// Glue between sequences and the trackers: per-window event slices, graphs, crops and
// accumulation over sub-windows.

#include "sft/common.hpp"
#include "sft/event_io.hpp"
#include "sft/graph.hpp"
#include "sft/head.hpp"
#include "sft/synthgen.hpp"
#include "sft/tracker.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <optional>
#include <vector>

namespace sft {

/// Events of window w with timestamps rebased to the window start; T = delta_t.
inline EventStream window_events(const SequenceRecord& rec, int w) {
  const int n = rec.num_windows();
  if (w < 0 || w >= n) throw ArgumentError(detail::cat("window ", w, " out of range [0, ", n, ")"));
  const std::int64_t t0 = std::int64_t(w) * rec.delta_t;
  const std::int64_t t1 = w + 1 == n ? rec.stream.T + 1 : t0 + rec.delta_t;
  EventStream out = rec.stream.slice(t0, t1);
  for (auto& e : out.points) e.t -= t0;
  out.T = rec.delta_t;
  return out;
}

/// Downsampled K-NN graph of a window's events, or nothing when the window is empty.
inline std::optional<EventGraph> window_graph(const EventStream& events, const ModelConfig& cfg,
                                              FlopCounter* fc = nullptr) {
  if (events.empty()) return std::nullopt;
  return build_knn_graph(downsample_uniform(events, cfg.max_points), cfg.knn_k, events.sensor, events.T, fc);
}

/// Sequence plus its stacked frames.
struct PreparedSequence {
  SequenceRecord record;
  FrameStack frames;

  explicit PreparedSequence(SequenceRecord rec) : record(std::move(rec)) {
    record.validate();
    frames = stack_events(record.stream, record.delta_t);
  }
  int num_windows() const { return record.num_windows(); }
  Image frame(int w) const { return frames.frame(w); }
};

struct TrackerInput {
  Image tmpl, search;
  CropTransform search_tf;
  std::optional<EventGraph> graph;
};

inline Crop template_crop(const PreparedSequence& seq, int w, const Box& box, const ModelConfig& cfg) {
  return crop_region(seq.frame(w), box, cfg.template_factor, cfg.template_size);
}

inline Crop search_crop(const PreparedSequence& seq, int w, const Box& centre, const ModelConfig& cfg) {
  return crop_region(seq.frame(w), centre, cfg.search_factor, cfg.search_size);
}

// ---------------------------------------------------------------------------
// Datasets

inline std::vector<SequenceRecord> generate_dataset(const SynthDatasetConfig& ds, std::uint64_t seed) {
  std::vector<SequenceRecord> out;
  for (int i = 0; i < ds.num_sequences; ++i) out.push_back(generate_sequence(random_synth_config(ds, i, seed)));
  return out;
}

inline std::string sequence_dir_name(int i) {
  std::ostringstream os;
  os << "seq_" << std::setw(3) << std::setfill('0') << i;
  return os.str();
}

inline void save_dataset(const std::filesystem::path& dir, const std::vector<SequenceRecord>& seqs) {
  for (std::size_t i = 0; i < seqs.size(); ++i) save_sequence(dir / sequence_dir_name(int(i)), seqs[i]);
}

/// Every subdirectory holding a meta.cfg, in name order.
inline std::vector<std::filesystem::path> dataset_sequence_dirs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ParseError(detail::cat("dataset directory ", dir.string(), " not found"));
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory() && std::filesystem::exists(e.path() / "meta.cfg")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw ParseError(detail::cat("no sequences under ", dir.string()));
  return dirs;
}

inline std::vector<PreparedSequence> load_dataset(const std::filesystem::path& dir) {
  std::vector<PreparedSequence> out;
  for (const auto& d : dataset_sequence_dirs(dir)) out.emplace_back(load_sequence(d));
  return out;
}

// ---------------------------------------------------------------------------
// Accumulation

/// Number of events of a rebased window that fall in the first j of k sub-windows (t < j dt / k).
inline std::size_t accumulated_count(const EventStream& events, int j, int k) {
  if (j >= k) return events.size();
  std::size_t n = 0;
  while (n < events.size() && events.points[n].t * k < std::int64_t(j) * events.T) ++n;
  return n;
}

/// Cumulative event set of sub-window j (1-based) out of k.
inline EventStream accumulated_events(const EventStream& events, int j, int k) {
  EventStream out{{}, events.T, events.sensor};
  out.points.assign(events.points.begin(), events.points.begin() + std::ptrdiff_t(accumulated_count(events, j, k)));
  return out;
}

/// k outputs from cached visual tokens and cumulative sub-window graphs. Empty sub-windows reuse
/// the previous graph vector (no gate at all if nothing has arrived yet).
/// `incremental` receives the graph + pyramid + gate + head cost of each output, `latency_us` its wall time.
template <typename S>
std::vector<HeadMaps<S>> accumulate_and_track(const Tracker<S>& fast, const Mat<S>& cached, const EventStream& events,
                                              int k, std::vector<std::uint64_t>* incremental = nullptr,
                                              std::vector<double>* latency_us = nullptr) {
  if (k < 1) throw ArgumentError(detail::cat("accumulate_and_track: k must be >= 1, got ", k));
  std::vector<HeadMaps<S>> out;
  out.reserve(std::size_t(k));
  if (incremental) incremental->clear();
  if (latency_us) latency_us->clear();
  std::optional<RowVec<S>> g;
  std::size_t last_count = 0;
  for (int j = 1; j <= k; ++j) {
    const auto start = std::chrono::steady_clock::now();
    FlopCounter fc;
    const std::size_t n = accumulated_count(events, j, k);
    if (n > 0 && n != last_count) {
      const EventGraph graph = *window_graph(accumulated_events(events, j, k), fast.config(), &fc);
      g = fast.graph_vector(graph, &fc);
      last_count = n;
    }
    out.push_back(fast.head_from_visual(cached, g ? &*g : nullptr, &fc).maps);
    if (incremental) incremental->push_back(fc.total);
    if (latency_us)
      latency_us->push_back(std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - start).count());
  }
  return out;
}

}  // namespace sft
