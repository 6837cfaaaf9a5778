#pragma once

#include "sft/common.hpp"
#include "sft/event_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <utility>
#include <vector>

namespace sft {

inline constexpr int kDefaultMaxPoints = 300;
inline constexpr int kDefaultK = 8;

struct VoxelGrid {
  int t = 12, y = 16, x = 16;
};

/// Undirected graph over normalised event positions (x/W, y/H, t/T).
struct EventGraph {
  std::vector<std::array<double, 3>> positions;  // (x, y, t) in [0,1]
  Mat<double> features;                          // nodes x width
  std::vector<std::pair<int, int>> edges;        // i < j, sorted, unique
  std::vector<std::vector<int>> neighbors;       // sorted adjacency lists

  int num_nodes() const { return static_cast<int>(positions.size()); }
  int feature_width() const { return static_cast<int>(features.cols()); }

  bool adjacent(int i, int j) const {
    const auto& n = neighbors[i];
    return std::binary_search(n.begin(), n.end(), j);
  }

  Mat<int> dense_adjacency() const {
    Mat<int> a = Mat<int>::Zero(num_nodes(), num_nodes());
    for (auto [i, j] : edges) a(i, j) = a(j, i) = 1;
    return a;
  }

  /// Installs an edge set from an arbitrary list of directed or undirected pairs.
  void set_edges(std::vector<std::pair<int, int>> pairs) {
    for (auto& [i, j] : pairs)
      if (i > j) std::swap(i, j);
    std::erase_if(pairs, [](const auto& e) { return e.first == e.second; });
    std::sort(pairs.begin(), pairs.end());
    pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
    edges = std::move(pairs);
    neighbors.assign(positions.size(), {});
    for (auto [i, j] : edges) {
      neighbors[i].push_back(j);
      neighbors[j].push_back(i);
    }
    for (auto& n : neighbors) std::sort(n.begin(), n.end());
  }

  void write_csv(std::ostream& nodes_out, std::ostream& edges_out) const {
    nodes_out << "# id,x,y,t";
    for (int c = 0; c < feature_width(); ++c) nodes_out << ",f" << c;
    nodes_out << '\n';
    for (int i = 0; i < num_nodes(); ++i) {
      nodes_out << i << ',' << positions[i][0] << ',' << positions[i][1] << ',' << positions[i][2];
      for (int c = 0; c < feature_width(); ++c) nodes_out << ',' << features(i, c);
      nodes_out << '\n';
    }
    edges_out << "# i,j\n";
    for (auto [i, j] : edges) edges_out << i << ',' << j << '\n';
  }
};

inline EventStream downsample_uniform(const EventStream& stream, int n_max = kDefaultMaxPoints) {
  if (n_max < 1) throw ArgumentError("downsample_uniform: n_max must be >= 1");
  const std::size_t m = stream.size();
  if (m <= std::size_t(n_max)) return stream;
  EventStream out{{}, stream.T, stream.sensor};
  out.points.reserve(n_max);
  for (std::size_t i = 0; i < std::size_t(n_max); ++i) out.points.push_back(stream.points[i * m / n_max]);
  return out;
}

namespace graph_detail {
inline EventGraph nodes_from_stream(const EventStream& stream, SensorSize sensor, std::int64_t T) {
  if (stream.empty()) throw ArgumentError("graph construction needs at least one event");
  EventGraph g;
  const auto n = stream.size();
  g.positions.resize(n);
  g.features.resize(static_cast<Eigen::Index>(n), 1);
  const double tn = T > 0 ? double(T) : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = stream.points[i];
    g.positions[i] = {double(e.x) / sensor.width, double(e.y) / sensor.height, double(e.t) / tn};
    g.features(Eigen::Index(i), 0) = e.p;
  }
  return g;
}

inline double dist2(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dt = a[2] - b[2];
  return dx * dx + dy * dy + dt * dt;
}
}  // namespace graph_detail

/// Number of pairwise distance evaluations made by build_knn_graph, times 8 flops each.
inline std::uint64_t knn_flops(std::uint64_t n) { return 8 * (n * (n - 1) / 2); }

/// Symmetrised k-NN graph: edge (i,j) iff j in N_k(i) or i in N_k(j). Ties -> lower index.
inline EventGraph build_knn_graph(const EventStream& stream, int k, SensorSize sensor, std::int64_t T,
                                  FlopCounter* flops = nullptr) {
  if (k < 1) throw ArgumentError("build_knn_graph: k must be >= 1");
  EventGraph g = graph_detail::nodes_from_stream(stream, sensor, T);
  const int n = g.num_nodes();
  Mat<double> d2(n, n);
  for (int i = 0; i < n; ++i) {
    d2(i, i) = 0;
    for (int j = i + 1; j < n; ++j) d2(i, j) = d2(j, i) = graph_detail::dist2(g.positions[i], g.positions[j]);
  }
  count(flops, knn_flops(std::uint64_t(n)));

  const int kk = std::min(k, n - 1);
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(std::size_t(n) * kk);
  std::vector<std::pair<double, int>> cand;
  for (int i = 0; i < n; ++i) {
    cand.clear();
    for (int j = 0; j < n; ++j)
      if (j != i) cand.emplace_back(d2(i, j), j);
    std::partial_sort(cand.begin(), cand.begin() + kk, cand.end());
    for (int r = 0; r < kk; ++r) pairs.emplace_back(i, cand[r].second);
  }
  g.set_edges(std::move(pairs));
  return g;
}

inline EventGraph build_radius_graph(const EventStream& stream, double r, SensorSize sensor, std::int64_t T) {
  // r == 0 is the edgeless graph
  if (r < 0 || std::isnan(r)) throw ArgumentError("build_radius_graph: r must be non-negative");
  EventGraph g = graph_detail::nodes_from_stream(stream, sensor, T);
  const int n = g.num_nodes();
  std::vector<std::pair<int, int>> pairs;
  if (r > 0) {
    const double r2 = r * r;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (graph_detail::dist2(g.positions[i], g.positions[j]) <= r2) pairs.emplace_back(i, j);
  }
  g.set_edges(std::move(pairs));
  return g;
}

inline EventGraph build_random_graph(const EventStream& stream, int degree, std::uint64_t seed, SensorSize sensor,
                                     std::int64_t T) {
  if (degree < 1) throw ArgumentError("build_random_graph: degree must be >= 1");
  EventGraph g = graph_detail::nodes_from_stream(stream, sensor, T);
  const int n = g.num_nodes();
  std::vector<std::pair<int, int>> pairs;
  std::vector<int> others;
  for (int i = 0; i < n; ++i) {
    others.clear();
    for (int j = 0; j < n; ++j)
      if (j != i) others.push_back(j);
    KeyedRng rng(hash_key(seed, std::uint64_t(i)));
    const int take = std::min<int>(degree, int(others.size()));
    // partial Fisher-Yates
    for (int r = 0; r < take; ++r) {
      const auto pick = r + int(rng.below(std::uint64_t(others.size() - r)));
      std::swap(others[r], others[pick]);
      pairs.emplace_back(i, others[r]);
    }
  }
  g.set_edges(std::move(pairs));
  return g;
}

struct ClusterAssignment {
  std::vector<int> cluster_of;                    // node -> cluster id
  std::vector<int> centers;                       // cluster -> representative node
  std::vector<std::pair<int, int>> coarse_edges;  // k < l, sorted, unique

  int num_clusters() const { return static_cast<int>(centers.size()); }
};

/// Voxel axes are (t, y, x). Cluster ids follow first appearance in node order.
inline ClusterAssignment voxel_cluster(const EventGraph& graph, VoxelGrid grid = {}) {
  if (grid.t < 1 || grid.y < 1 || grid.x < 1) throw ArgumentError("voxel_cluster: grid dims must be >= 1");
  const int n = graph.num_nodes();
  auto cell = [](double v, int g) { return std::clamp(static_cast<int>(std::floor(v * g)), 0, g - 1); };

  ClusterAssignment out;
  out.cluster_of.resize(n);
  std::map<std::array<int, 3>, int> voxel_id;
  std::vector<std::array<int, 3>> voxel_of_cluster;
  for (int i = 0; i < n; ++i) {
    const auto& p = graph.positions[i];
    const std::array<int, 3> v{cell(p[2], grid.t), cell(p[1], grid.y), cell(p[0], grid.x)};
    auto [it, inserted] = voxel_id.try_emplace(v, int(voxel_of_cluster.size()));
    if (inserted) voxel_of_cluster.push_back(v);
    out.cluster_of[i] = it->second;
  }

  const int nc = int(voxel_of_cluster.size());
  out.centers.assign(nc, -1);
  std::vector<double> best(nc, std::numeric_limits<double>::infinity());
  for (int i = 0; i < n; ++i) {
    const int k = out.cluster_of[i];
    const auto& v = voxel_of_cluster[k];
    const std::array<double, 3> centroid{(v[2] + 0.5) / grid.x, (v[1] + 0.5) / grid.y, (v[0] + 0.5) / grid.t};
    const double d = graph_detail::dist2(graph.positions[i], centroid);
    if (d < best[k]) {
      best[k] = d;
      out.centers[k] = i;
    }
  }

  std::vector<std::pair<int, int>> ce;
  for (auto [i, j] : graph.edges) {
    int a = out.cluster_of[i], b = out.cluster_of[j];
    if (a == b) continue;
    if (a > b) std::swap(a, b);
    ce.emplace_back(a, b);
  }
  std::sort(ce.begin(), ce.end());
  ce.erase(std::unique(ce.begin(), ce.end()), ce.end());
  out.coarse_edges = std::move(ce);
  return out;
}

/// Row k = elementwise max over the members of cluster k. argmax receives the winning node per entry.
template <typename S>
Mat<S> maxpool_features(const Mat<S>& features, const ClusterAssignment& assignment, Mat<int>* argmax = nullptr) {
  if (features.rows() != Eigen::Index(assignment.cluster_of.size()))
    throw ShapeError(detail::cat("maxpool_features: features have ", features.rows(), " rows, assignment covers ",
                                 assignment.cluster_of.size(), " nodes"));
  const Eigen::Index nc = assignment.num_clusters(), d = features.cols();
  Mat<S> out = Mat<S>::Constant(nc, d, -std::numeric_limits<S>::infinity());
  Mat<int> arg = Mat<int>::Constant(nc, d, -1);
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const int k = assignment.cluster_of[std::size_t(i)];
    for (Eigen::Index c = 0; c < d; ++c) {
      if (features(i, c) > out(k, c) || arg(k, c) < 0) {
        out(k, c) = features(i, c);
        arg(k, c) = int(i);
      }
    }
  }
  if (argmax) *argmax = std::move(arg);
  return out;
}

}  // namespace sft
