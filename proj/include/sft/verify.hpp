#pragma once

// Finite-difference gradient suite over small float64 instances of every differentiable piece.

#include "sft/common.hpp"
#include "sft/head.hpp"
#include "sft/losses.hpp"
#include "sft/nn.hpp"
#include "sft/pipeline.hpp"
#include "sft/tracker.hpp"
#include "sft/trainer.hpp"

#include <string>
#include <vector>

namespace sft {

struct GradSuiteResult {
  std::string name;
  GradCheckReport report;
};

namespace verify_detail {

inline void randomize(ParamStore<double>& store, KeyedRng& rng, double scale) {
  for (auto* p : store.params())
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = scale * rng.normal();
}

inline Mat<double> random_mat(Eigen::Index r, Eigen::Index c, KeyedRng& rng, double scale = 1) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline EventStream random_stream(int n, SensorSize sensor, std::int64_t T, KeyedRng& rng) {
  EventStream s{{}, T, sensor};
  for (int i = 0; i < n; ++i)
    s.points.push_back({std::int64_t(rng.below(std::uint64_t(T))), int(rng.below(std::uint64_t(sensor.width))),
                        int(rng.below(std::uint64_t(sensor.height))), rng.below(2) ? 1 : -1});
  std::stable_sort(s.points.begin(), s.points.end(), [](const EventPoint& a, const EventPoint& b) { return a.t < b.t; });
  return s;
}

inline Image random_image(int c, int h, int w, KeyedRng& rng) {
  Image img(c, h, w);
  for (auto& v : img.data) v = float(rng.uniform());
  return img;
}

}  // namespace verify_detail

/// Tiny float64 tracker config used by the gradient suite.
inline ModelConfig tiny_model_config() {
  ModelConfig m;
  m.embed_dim = 8;
  m.heads = 2;
  m.patch_size = 4;
  m.template_size = 8;
  m.search_size = 8;
  m.depth_slow = 2;
  m.depth_fast = 1;
  m.gcn_dim1 = 4;
  m.gcn_dim2 = 8;
  m.mlp_ratio = 2;
  return m;
}

inline std::vector<GradSuiteResult> run_gradient_suite(std::uint64_t seed, double tol = 1e-4) {
  using namespace verify_detail;
  std::vector<GradSuiteResult> out;
  KeyedRng rng(hash_key(seed, 0x67726164ULL));

  {
    ParamStore<double> store;
    AttentionBlock<double> blk(store, "block", "vit", 8, 2, 4);
    auto& x = store.add("input", "vit", 6, 8);
    randomize(store, rng, 0.5);
    const Mat<double> r = random_mat(6, 8, rng);
    out.push_back({"attention_block", grad_check(store, [&](ParamStore<double>&, bool g) {
                     typename AttentionBlock<double>::Cache c;
                     const Mat<double> y = blk.forward(x.value, c);
                     if (g) {
                       x.ensure_grad();
                       x.grad += blk.backward(c, r);
                     }
                     return (y.array() * r.array()).sum();
                   }, tol)});
  }
  {
    ParamStore<double> store;
    GcnLayer<double> layer(store, "gcn", "gcn", 3, 5);
    auto& h = store.add("input", "gcn", 12, 3);
    randomize(store, rng, 0.7);
    const EventGraph graph = build_knn_graph(random_stream(12, {16, 16}, 1000, rng), 3, {16, 16}, 1000);
    const NormalizedAdjacency adj(graph);
    const Mat<double> r = random_mat(12, 5, rng);
    out.push_back({"gcn_layer", grad_check(store, [&](ParamStore<double>&, bool g) {
                     typename GcnLayer<double>::Cache c;
                     const Mat<double> y = layer.forward(adj, h.value, c);
                     if (g) {
                       h.ensure_grad();
                       h.grad += layer.backward(adj, c, r);
                     }
                     return (y.array() * r.array()).sum();
                   }, tol)});
  }
  {
    ParamStore<double> store;
    CenterHead<double> head(store, "head", "head", 8, 3);
    auto& t = store.add("input", "head", 9, 8);
    randomize(store, rng, 0.5);
    const Mat<double> rs = random_mat(9, 1, rng), ro = random_mat(9, 2, rng), rz = random_mat(9, 2, rng);
    out.push_back({"head_branches", grad_check(store, [&](ParamStore<double>&, bool g) {
                     typename CenterHead<double>::Cache c;
                     const auto m = head.forward(t.value, c);
                     if (g) {
                       HeadMaps<double> d = HeadMaps<double>::zeros_like(m);
                       d.score = rs;
                       d.offset = ro;
                       d.size = rz;
                       t.ensure_grad();
                       t.grad += head.backward(c, d);
                     }
                     return (m.score.array() * rs.array()).sum() + (m.offset.array() * ro.array()).sum() +
                            (m.size.array() * rz.array()).sum();
                   }, tol)});
  }
  {
    ParamStore<double> store;
    auto& s = store.add("score", "head", 25, 1);
    for (Eigen::Index i = 0; i < s.value.size(); ++i) s.value(i) = rng.uniform(0.05, 0.95);
    const TargetMaps tgt = encode_target({0.3, 0.35, 0.4, 0.3}, 5, 5);
    out.push_back({"focal_loss", grad_check(store, [&](ParamStore<double>&, bool g) {
                     Mat<double> d;
                     const double l = focal_loss(s.value, tgt.heatmap, g ? &d : nullptr);
                     if (g) s.grad += d;
                     return l;
                   }, tol)});
  }
  for (const char* which : {"l1_loss", "giou_loss"}) {
    ParamStore<double> store;
    auto& c = store.add("corners", "head", 1, 4);
    c.value << 0.21, 0.18, 0.63, 0.55;
    const Box gt{0.3, 0.25, 0.4, 0.42};
    const bool is_l1 = std::string(which) == "l1_loss";
    out.push_back({which, grad_check(store, [&](ParamStore<double>&, bool g) {
                     const Box b{c.value(0), c.value(1), c.value(2) - c.value(0), c.value(3) - c.value(1)};
                     std::array<double, 4> d{};
                     const double l = is_l1 ? l1_loss(b, gt, g ? &d : nullptr) : giou_loss(b, gt, g ? &d : nullptr);
                     if (g)
                       for (int i = 0; i < 4; ++i) c.grad(0, i) += d[std::size_t(i)];
                     return l;
                   }, tol)});
  }
  {
    ParamStore<double> store;
    auto& s = store.add("student", "vit", 4, 6);
    randomize(store, rng, 1.0);
    const Mat<double> teacher = random_mat(4, 6, rng);
    out.push_back({"kd_loss", grad_check(store, [&](ParamStore<double>&, bool g) {
                     Mat<double> d;
                     const double l = kd_loss(s.value, teacher, g ? &d : nullptr);
                     if (g) s.grad += d;
                     return l;
                   }, tol)});
  }
  {
    Tracker<double> model(tiny_model_config(), TrackerKind::slow, seed);
    randomize(model.params(), rng, 0.3);
    TrackerInput in;
    in.tmpl = random_image(kFrameChannels, 8, 8, rng);
    in.search = random_image(kFrameChannels, 8, 8, rng);
    in.graph = build_knn_graph(random_stream(2, {16, 16}, 1000, rng), 1, {16, 16}, 1000);
    const Box target{0.3, 0.2, 0.35, 0.45};
    const Mat<double> teacher = random_mat(4, 8, rng);
    out.push_back({"slow_tracker", grad_check(model.params(), [&](ParamStore<double>&, bool g) {
                     return sample_loss(model, in, target, LossWeights{}, &teacher, g ? 1.0 : 0.0).total;
                   }, tol)});
  }
  return out;
}

}  // namespace sft
