#pragma once

#include "sft/common.hpp"
#include "sft/graph.hpp"
#include "sft/nn.hpp"

#include <algorithm>
#include <array>
#include <sstream>
#include <string>
#include <vector>

namespace sft {

// ---------------------------------------------------------------------------
// Fusion plan: which pyramid level enters the token stream after which block.

enum class FuseMode { append, gate };

struct FusionHook {
  int depth = 0;  // 0 = before the first block, d = after block d
  FuseMode mode = FuseMode::gate;
  int level = 3;  // pyramid level 1..3
  friend bool operator==(const FusionHook&, const FusionHook&) = default;
};

struct FusionPlan {
  std::vector<FusionHook> hooks;

  bool empty() const { return hooks.empty(); }
  bool uses_level(int level) const {
    return std::any_of(hooks.begin(), hooks.end(), [&](const FusionHook& h) { return h.level == level; });
  }

  void validate(int depth) const {
    for (const auto& h : hooks) {
      if (h.depth < 0 || h.depth > depth)
        throw ConfigError(detail::cat("fusion hook at depth ", h.depth, " exceeds the depth budget ", depth));
      if (h.level < 1 || h.level > 3) throw ConfigError(detail::cat("fusion hook level ", h.level, " not in 1..3"));
      if (h.mode == FuseMode::append && h.depth == depth)
        throw ConfigError("append hook after the final block would be stripped before use");
    }
  }

  /// "depth:mode:level" entries separated by commas. depth may be a number, "mid" (ceil(d/2)) or "end".
  static FusionPlan parse(const std::string& text, int depth) {
    FusionPlan plan;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty() || item == "none") continue;
      std::stringstream parts(item);
      std::string d, m, l;
      if (!std::getline(parts, d, ':') || !std::getline(parts, m, ':') || !std::getline(parts, l, ':'))
        throw ConfigError(detail::cat("fusion plan entry '", item, "' is not depth:mode:level"));
      FusionHook h;
      if (d == "end") h.depth = depth;
      else if (d == "mid") h.depth = (depth + 1) / 2;
      else h.depth = std::stoi(d);
      if (m == "append") h.mode = FuseMode::append;
      else if (m == "gate") h.mode = FuseMode::gate;
      else throw ConfigError(detail::cat("fusion mode '", m, "' is not append|gate"));
      h.level = std::stoi(l);
      plan.hooks.push_back(h);
    }
    std::stable_sort(plan.hooks.begin(), plan.hooks.end(),
                     [](const FusionHook& a, const FusionHook& b) { return a.depth < b.depth; });
    plan.validate(depth);
    return plan;
  }

  /// Level 1 appended at the input, level 2 appended mid-stack, level 3 gated after the last block.
  static FusionPlan multi_scale(int depth) { return parse("0:append:1,mid:append:2,end:gate:3", depth); }
  static FusionPlan final_gate(int depth) { return parse("end:gate:3", depth); }
};

inline constexpr const char* kSlowPlan = "0:append:1,mid:append:2,end:gate:3";
inline constexpr const char* kFastPlan = "end:gate:3";

// ---------------------------------------------------------------------------
// Cross-view fusion

/// F' = F_v * g + F_v with g broadcast over tokens.
template <typename S>
Mat<S> fuse_gate(const Mat<S>& fv, const RowVec<S>& g, FlopCounter* fc = nullptr) {
  if (fv.cols() != g.cols())
    throw ShapeError(detail::cat("fuse_gate: token width ", fv.cols(), " vs graph vector width ", g.cols()));
  count(fc, 2 * std::uint64_t(fv.size()));
  Mat<S> out(fv.rows(), fv.cols());
  for (Eigen::Index i = 0; i < fv.rows(); ++i)
    for (Eigen::Index c = 0; c < fv.cols(); ++c) out(i, c) = fv(i, c) * g(c) + fv(i, c);
  return out;
}

template <typename S>
void fuse_gate_backward(const Mat<S>& fv, const RowVec<S>& g, const Mat<S>& dout, Mat<S>& dfv, RowVec<S>& dg) {
  dfv = dout.array().rowwise() * (g.array() + S(1));
  dg += (dout.array() * fv.array()).colwise().sum().matrix();
}

/// Appends g as one token; returns its row index.
template <typename S>
int fuse_append(Mat<S>& tokens, const RowVec<S>& g) {
  if (tokens.cols() != g.cols())
    throw ShapeError(detail::cat("fuse_append: token width ", tokens.cols(), " vs graph vector width ", g.cols()));
  tokens.conservativeResize(tokens.rows() + 1, Eigen::NoChange);
  tokens.row(tokens.rows() - 1) = g;
  return int(tokens.rows() - 1);
}

// ---------------------------------------------------------------------------
// GCN feature pyramid

struct PyramidConfig {
  int in_dim = 1;
  int dim1 = 16;
  int dim2 = 64;
  int out_dim = 64;
  VoxelGrid grid{};
  std::array<bool, 3> levels{true, true, true};
};

template <typename S>
struct GraphPyramidOutput {
  std::array<RowVec<S>, 3> level;  // F_g1, F_g2, F_g3 (unused levels are empty)
};

/// G' = GCN1(G); F1 = P1(mean G'); G'' = voxelmax(GCN2(G')); F2 = P2(mean G''); F3 = L(max G'').
template <typename S>
struct GraphPyramidNet {
  PyramidConfig cfg;
  GcnLayer<S> gcn1, gcn2;
  Linear<S> proj1, proj2, linear3;

  struct Cache {
    NormalizedAdjacency adj;
    ClusterAssignment clusters;
    typename GcnLayer<S>::Cache c1, c2;
    Mat<S> g1, y2, pooled;
    Mat<int> pool_arg;
    RowVec<S> mean1, mean2, max3;
    std::vector<int> max3_arg;
  };

  GraphPyramidNet() = default;
  GraphPyramidNet(ParamStore<S>& store, const std::string& name, const std::string& group, PyramidConfig c)
      : cfg(c),
        gcn1(store, name + ".gcn1", group, c.in_dim, c.dim1),
        gcn2(store, name + ".gcn2", group, c.dim1, c.dim2) {
    if (cfg.levels[0]) proj1 = Linear<S>(store, name + ".proj1", group, c.dim1, c.out_dim);
    if (cfg.levels[1]) proj2 = Linear<S>(store, name + ".proj2", group, c.dim2, c.out_dim);
    if (cfg.levels[2]) linear3 = Linear<S>(store, name + ".linear3", group, c.dim2, c.out_dim);
  }

  GraphPyramidOutput<S> forward(const EventGraph& graph, Cache& cache, FlopCounter* fc = nullptr) const {
    if (graph.num_nodes() == 0) throw ArgumentError("graph_pyramid: empty graph");
    if (graph.feature_width() != cfg.in_dim)
      throw ShapeError(detail::cat("graph_pyramid: node features have width ", graph.feature_width(), ", expected ",
                                   cfg.in_dim));
    cache.adj = NormalizedAdjacency(graph);
    const Mat<S> h0 = graph.features.template cast<S>();
    cache.g1 = gcn1.forward(cache.adj, h0, cache.c1, fc);
    cache.y2 = gcn2.forward(cache.adj, cache.g1, cache.c2, fc);
    cache.clusters = voxel_cluster(graph, cfg.grid);
    cache.pooled = maxpool_features(cache.y2, cache.clusters, &cache.pool_arg);

    GraphPyramidOutput<S> out;
    if (cfg.levels[0]) {
      cache.mean1 = cache.g1.colwise().mean();
      out.level[0] = proj1.forward(cache.mean1, fc);
    }
    if (cfg.levels[1]) {
      cache.mean2 = cache.pooled.colwise().mean();
      out.level[1] = proj2.forward(cache.mean2, fc);
    }
    if (cfg.levels[2]) {
      const auto d = cache.pooled.cols();
      cache.max3.resize(d);
      cache.max3_arg.assign(std::size_t(d), 0);
      for (Eigen::Index c = 0; c < d; ++c) {
        Eigen::Index r;
        cache.max3(c) = cache.pooled.col(c).maxCoeff(&r);
        cache.max3_arg[std::size_t(c)] = int(r);
      }
      out.level[2] = linear3.forward(cache.max3, fc);
    }
    return out;
  }

  /// grads[l] may be empty for levels that received no gradient.
  void backward(const Cache& cache, const std::array<RowVec<S>, 3>& grads) const {
    Mat<S> dpooled = Mat<S>::Zero(cache.pooled.rows(), cache.pooled.cols());
    Mat<S> dg1 = Mat<S>::Zero(cache.g1.rows(), cache.g1.cols());
    if (cfg.levels[0] && grads[0].size()) {
      const Mat<S> dmean = proj1.backward(cache.mean1, grads[0]);
      dg1.rowwise() += dmean.row(0) / S(cache.g1.rows());
    }
    if (cfg.levels[1] && grads[1].size()) {
      const Mat<S> dmean = proj2.backward(cache.mean2, grads[1]);
      dpooled.rowwise() += dmean.row(0) / S(cache.pooled.rows());
    }
    if (cfg.levels[2] && grads[2].size()) {
      const Mat<S> dmax = linear3.backward(cache.max3, grads[2]);
      for (Eigen::Index c = 0; c < dmax.cols(); ++c) dpooled(cache.max3_arg[std::size_t(c)], c) += dmax(0, c);
    }
    Mat<S> dy2 = Mat<S>::Zero(cache.y2.rows(), cache.y2.cols());
    for (Eigen::Index k = 0; k < dpooled.rows(); ++k)
      for (Eigen::Index c = 0; c < dpooled.cols(); ++c) dy2(cache.pool_arg(k, c), c) += dpooled(k, c);
    dg1 += gcn2.backward(cache.adj, cache.c2, dy2);
    gcn1.backward(cache.adj, cache.c1, dg1);
  }
};

}  // namespace sft
