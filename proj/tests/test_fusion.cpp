#include "sft/fusion.hpp"
#include "sft/pipeline.hpp"
#include "sft/tracker.hpp"
#include "sft/verify.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace sft;

namespace {

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, KeyedRng& rng) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

EventStream random_events(int n, SensorSize sensor, std::int64_t T, std::uint64_t seed, std::int64_t t_lo = 0,
                          std::int64_t t_hi = -1) {
  if (t_hi < 0) t_hi = T;
  KeyedRng rng(seed);
  EventStream s{{}, T, sensor};
  for (int i = 0; i < n; ++i)
    s.points.push_back({t_lo + std::int64_t(rng.below(std::uint64_t(t_hi - t_lo))), int(rng.below(std::uint64_t(sensor.width))),
                        int(rng.below(std::uint64_t(sensor.height))), rng.below(2) ? 1 : -1});
  std::stable_sort(s.points.begin(), s.points.end(), [](auto& a, auto& b) { return a.t < b.t; });
  return s;
}

Image random_image(int c, int h, int w, std::uint64_t seed) {
  KeyedRng rng(seed);
  Image img(c, h, w);
  for (auto& v : img.data) v = float(rng.uniform());
  return img;
}

void expect_maps_equal(const HeadMaps<double>& a, const HeadMaps<double>& b) {
  EXPECT_EQ(a.score, b.score);
  EXPECT_EQ(a.offset, b.offset);
  EXPECT_EQ(a.size, b.size);
}

}  // namespace

TEST(Gate, ZeroOnesAndScalarLoop) {
  KeyedRng rng(1);
  const Mat<double> fv = random_mat(9, 6, rng);
  EXPECT_EQ(fuse_gate(fv, RowVec<double>(RowVec<double>::Zero(6))), fv);
  EXPECT_EQ(fuse_gate(fv, RowVec<double>(RowVec<double>::Ones(6))), Mat<double>(2 * fv));
  RowVec<double> g = random_mat(1, 6, rng);
  const Mat<double> out = fuse_gate(fv, g);
  for (int i = 0; i < 9; ++i)
    for (int c = 0; c < 6; ++c) {
      const double expect = fv(i, c) * g(c) + fv(i, c);
      ASSERT_EQ(out(i, c), expect);
    }
  EXPECT_THROW(fuse_gate(fv, RowVec<double>(RowVec<double>::Zero(5))), ShapeError);
}

TEST(Gate, LinearInTokens) {
  KeyedRng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat<double> fv = random_mat(1 + Eigen::Index(rng.below(10)), 4, rng);
    const RowVec<double> g = random_mat(1, 4, rng);
    const double a = rng.uniform(-3, 3);
    const Mat<double> lhs = fuse_gate(Mat<double>(a * fv), g);
    const Mat<double> rhs = a * fuse_gate(fv, g);
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
  }
  const float a = 4.0f;  // power of two scaling is exact
  Mat<float> fv = Mat<float>::Random(5, 3);
  RowVec<float> g = RowVec<float>::Random(3);
  EXPECT_EQ(fuse_gate(Mat<float>(a * fv), g), Mat<float>(a * fuse_gate(fv, g)));
}

TEST(Append, LengthCopyAndStrip) {
  KeyedRng rng(3);
  Mat<double> tokens = random_mat(5, 4, rng);
  const Mat<double> before = tokens;
  const RowVec<double> g = random_mat(1, 4, rng);
  const int idx = fuse_append(tokens, g);
  EXPECT_EQ(idx, 5);
  ASSERT_EQ(tokens.rows(), 6);
  EXPECT_EQ(RowVec<double>(tokens.row(5)), g);
  EXPECT_EQ(Mat<double>(tokens.topRows(5)), before);
  EXPECT_THROW(fuse_append(tokens, RowVec<double>(RowVec<double>::Zero(3))), ShapeError);
}

TEST(Plan, ParseAndDefaults) {
  const auto slow = FusionPlan::multi_scale(12);
  ASSERT_EQ(slow.hooks.size(), 3u);
  EXPECT_EQ(slow.hooks[0], (FusionHook{0, FuseMode::append, 1}));
  EXPECT_EQ(slow.hooks[1], (FusionHook{6, FuseMode::append, 2}));
  EXPECT_EQ(slow.hooks[2], (FusionHook{12, FuseMode::gate, 3}));
  EXPECT_EQ(FusionPlan::multi_scale(5).hooks[1].depth, 3);
  const auto fast = FusionPlan::final_gate(6);
  ASSERT_EQ(fast.hooks.size(), 1u);
  EXPECT_EQ(fast.hooks[0], (FusionHook{6, FuseMode::gate, 3}));
  EXPECT_TRUE(FusionPlan::parse("none", 6).empty());
  EXPECT_THROW(FusionPlan::parse("3:blend:1", 6), ConfigError);
  EXPECT_THROW(FusionPlan::parse("3:gate", 6), ConfigError);
  EXPECT_THROW(FusionPlan::parse("end:append:1", 6), ConfigError);
  EXPECT_THROW(FusionPlan::parse("2:gate:4", 6), ConfigError);
  const PyramidConfig pc;
  EXPECT_EQ(pc.in_dim, 1);
  EXPECT_EQ(pc.dim1, 16);
  EXPECT_EQ(pc.dim2, 64);
  EXPECT_EQ(pc.grid.t, 12);
  EXPECT_EQ(pc.grid.y, 16);
  EXPECT_EQ(pc.grid.x, 16);
}

TEST(Pyramid, ZeroFeaturesZeroBiasesGiveZero) {
  ParamStore<double> s;
  PyramidConfig pc;
  pc.out_dim = 8;
  GraphPyramidNet<double> net(s, "gcn", "gcn", pc);
  KeyedRng rng(4);
  for (auto* p : s.params()) p->value = random_mat(p->value.rows(), p->value.cols(), rng);
  for (auto* p : s.params())
    if (p->name.find(".bias") != std::string::npos) p->value.setZero();
  EventGraph g = build_knn_graph(random_events(40, {16, 16}, 1000, 5), 4, {16, 16}, 1000);
  g.features.setZero();
  typename GraphPyramidNet<double>::Cache c;
  const auto out = net.forward(g, c);
  for (int l = 0; l < 3; ++l) EXPECT_TRUE(out.level[std::size_t(l)].isZero(0)) << l;
}

TEST(Pyramid, SingleNodeCompositionOracle) {
  ParamStore<double> s;
  PyramidConfig pc;
  pc.dim1 = 3;
  pc.dim2 = 5;
  pc.out_dim = 4;
  GraphPyramidNet<double> net(s, "gcn", "gcn", pc);
  KeyedRng rng(6);
  for (auto* p : s.params()) p->value = random_mat(p->value.rows(), p->value.cols(), rng);
  EventStream st{{{7, 3, 4, -1}}, 10, {8, 8}};
  const EventGraph g = build_radius_graph(st, 0.0, st.sensor, st.T);
  typename GraphPyramidNet<double>::Cache c;
  const auto out = net.forward(g, c);

  auto lin = [&](const Mat<double>& x, const std::string& n) {
    Mat<double> y = x * s.at(n + ".weight").value;
    y.row(0) += s.at(n + ".bias").value.row(0);
    return y;
  };
  Mat<double> x(1, 1);
  x(0, 0) = -1;
  const Mat<double> g1 = lin(x, "gcn.gcn1").cwiseMax(0.0);
  const Mat<double> g2 = lin(g1, "gcn.gcn2").cwiseMax(0.0);
  EXPECT_LT((out.level[0] - lin(g1, "gcn.proj1")).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((out.level[1] - lin(g2, "gcn.proj2")).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((out.level[2] - lin(g2, "gcn.linear3")).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pyramid, InvariantToNodeRelabeling) {
  ParamStore<double> s;
  PyramidConfig pc;
  pc.out_dim = 6;
  GraphPyramidNet<double> net(s, "gcn", "gcn", pc);
  KeyedRng rng(7);
  for (auto* p : s.params()) p->value = 0.3 * random_mat(p->value.rows(), p->value.cols(), rng);
  const auto st = random_events(60, {32, 32}, 5000, 8);
  const EventGraph g = build_knn_graph(st, 5, st.sensor, st.T);
  std::vector<int> perm(60);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> inv(60);
  for (int i = 0; i < 60; ++i) inv[std::size_t(perm[std::size_t(i)])] = i;
  EventGraph gp;
  gp.features.resize(60, 1);
  for (int i = 0; i < 60; ++i) {
    gp.positions.push_back(g.positions[std::size_t(perm[std::size_t(i)])]);
    gp.features(i, 0) = g.features(perm[std::size_t(i)], 0);
  }
  std::vector<std::pair<int, int>> e;
  for (auto [i, j] : g.edges) e.emplace_back(inv[std::size_t(i)], inv[std::size_t(j)]);
  gp.set_edges(e);
  typename GraphPyramidNet<double>::Cache c;
  const auto a = net.forward(g, c);
  const auto b = net.forward(gp, c);
  for (int l = 0; l < 3; ++l)
    EXPECT_LT((a.level[std::size_t(l)] - b.level[std::size_t(l)]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Accumulation, NestedCumulativeSets) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ev = random_events(400, {32, 32}, 10000, 100 + seed);
    for (int k : {1, 2, 3, 5}) {
      std::size_t prev = 0;
      for (int j = 1; j <= k; ++j) {
        const auto a = accumulated_events(ev, j, k);
        ASSERT_GE(a.size(), prev);
        for (std::size_t i = 0; i < a.size(); ++i) {
          ASSERT_EQ(a.points[i], ev.points[i]);
          if (j < k) {
            ASSERT_LT(a.points[i].t * k, j * ev.T);
          }
        }
        prev = a.size();
      }
      EXPECT_EQ(prev, ev.size());
    }
  }
}

TEST(Accumulation, KOneEqualsFullForwardBitExact) {
  ModelConfig m = tiny_model_config();
  m.max_points = 50;
  Tracker<double> fast(m, TrackerKind::fast, 11);
  ASSERT_TRUE(fast.supports_accumulation());
  const Image z = random_image(3, 8, 8, 12), x = random_image(3, 8, 8, 13);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto ev = random_events(120, {16, 16}, 10000, 200 + seed);
    const auto graph = window_graph(ev, m);
    const auto full = fast.forward(z, x, &*graph);
    const auto acc = accumulate_and_track(fast, fast.visual_tokens(z, x), ev, 1);
    ASSERT_EQ(acc.size(), 1u);
    expect_maps_equal(acc[0], full.maps);
  }
}

TEST(Accumulation, ThreeOutputsAndEmptySubWindows) {
  ModelConfig m = tiny_model_config();
  Tracker<double> fast(m, TrackerKind::fast, 14);
  const Image z = random_image(3, 8, 8, 15), x = random_image(3, 8, 8, 16);
  const Mat<double> cached = fast.visual_tokens(z, x);

  const auto ev = random_events(90, {16, 16}, 9000, 17);
  std::vector<std::uint64_t> inc;
  std::vector<double> lat;
  const auto out = accumulate_and_track(fast, cached, ev, 3, &inc, &lat);
  ASSERT_EQ(out.size(), 3u);
  ASSERT_EQ(inc.size(), 3u);
  ASSERT_EQ(lat.size(), 3u);
  for (double l : lat) EXPECT_GT(l, 0);
  const auto k1 = accumulate_and_track(fast, cached, ev, 1);
  expect_maps_equal(out[2], k1[0]);

  const auto late = random_events(30, {16, 16}, 9000, 18, 6000, 9000);
  const auto out_late = accumulate_and_track(fast, cached, late, 3);
  const auto ungated = fast.head_from_visual(cached, nullptr).maps;
  expect_maps_equal(out_late[0], ungated);
  expect_maps_equal(out_late[1], ungated);

  const auto early = random_events(30, {16, 16}, 9000, 19, 0, 3000);
  const auto out_early = accumulate_and_track(fast, cached, early, 3);
  expect_maps_equal(out_early[1], out_early[0]);
  expect_maps_equal(out_early[2], out_early[0]);

  EXPECT_THROW(accumulate_and_track(fast, cached, ev, 0), ArgumentError);
}

TEST(Accumulation, SlowPlanCannotAccumulate) {
  Tracker<double> slow(tiny_model_config(), TrackerKind::slow, 1);
  EXPECT_FALSE(slow.supports_accumulation());
  EXPECT_THROW(slow.visual_tokens(Image(3, 8, 8), Image(3, 8, 8)), ConfigError);
}
