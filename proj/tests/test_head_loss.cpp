#include "sft/head.hpp"
#include "sft/losses.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace sft;

namespace {

HeadMaps<double> blank_maps(int side) {
  HeadMaps<double> m;
  m.height = m.width = side;
  m.score = Mat<double>::Zero(side * side, 1);
  m.offset = Mat<double>::Zero(side * side, 2);
  m.size = Mat<double>::Zero(side * side, 2);
  return m;
}

Box random_box(KeyedRng& rng) {
  return {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.01, 1.5), rng.uniform(0.01, 1.5)};
}

}  // namespace

TEST(Head, ZeroWeightsGiveHalfScores) {
  ParamStore<double> s;
  CenterHead<double> head(s, "head", "head", 8, 4);
  typename CenterHead<double>::Cache c;
  const auto maps = head.forward(Mat<double>::Zero(16, 8), c);
  EXPECT_TRUE((maps.score.array() == 0.5).all());
  EXPECT_EQ(maps.score.rows(), 16);
  EXPECT_EQ(maps.score.cols(), 1);
  EXPECT_EQ(maps.offset.cols(), 2);
  EXPECT_EQ(maps.size.cols(), 2);
  EXPECT_THROW(head.forward(Mat<double>::Zero(15, 8), c), ShapeError);
  EXPECT_THROW(head.forward(Mat<double>::Zero(9, 8), c), ShapeError);
}

TEST(Head, FiniteDifferenceGradients) {
  ParamStore<double> s;
  CenterHead<double> head(s, "head", "head", 4, 3);
  auto& t = s.add("tokens", "in", 9, 4);
  KeyedRng rng(1);
  for (auto* p : s.params())
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = 0.5 * rng.normal();
  Mat<double> r(9, 5);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
  const auto rep = grad_check(s, [&](ParamStore<double>&, bool g) {
    typename CenterHead<double>::Cache c;
    const auto m = head.forward(t.value, c);
    if (g) {
      auto d = HeadMaps<double>::zeros_like(m);
      d.score = r.col(0);
      d.offset = r.middleCols(1, 2);
      d.size = r.rightCols(2);
      t.grad += head.backward(c, d);
    }
    return (m.score.array() * r.col(0).array()).sum() + (m.offset.array() * r.middleCols(1, 2).array()).sum() +
           (m.size.array() * r.rightCols(2).array()).sum();
  }, 1e-4);
  EXPECT_TRUE(rep.pass) << rep.max_rel_error();
}

TEST(Decode, OneHotArithmetic) {
  auto m = blank_maps(16);
  const int i = 8 * 16 + 8;
  m.score(i, 0) = 1;
  m.offset.row(i) << 0.5, 0.5;
  m.size.row(i) << 0.25, 0.25;
  const auto d = decode_box(m);
  EXPECT_EQ(d.row, 8);
  EXPECT_EQ(d.col, 8);
  EXPECT_DOUBLE_EQ(d.box.cx(), 0.53125);
  EXPECT_DOUBLE_EQ(d.box.cy(), 0.53125);
  EXPECT_DOUBLE_EQ(d.box.w, 0.25);
  EXPECT_DOUBLE_EQ(d.box.h, 0.25);
}

TEST(Decode, ArgmaxMatchesFullScanWithTies) {
  KeyedRng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto m = blank_maps(8);
    for (int i = 0; i < 64; ++i) m.score(i, 0) = double(rng.below(6)) / 5;  // many ties
    int best = 0;
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c)
        if (m.score(r * 8 + c, 0) > m.score(best, 0)) best = r * 8 + c;
    const auto d = decode_box(m);
    ASSERT_EQ(d.row * 8 + d.col, best);
    ASSERT_EQ(d.confidence, m.score(best, 0));
  }
}

TEST(Decode, EncodeRoundTrip) {
  KeyedRng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const Box gt = Box::from_center(rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.6),
                                    rng.uniform(0.05, 0.6));
    const auto t = encode_target(gt, 8, 8);
    EXPECT_EQ(t.heatmap.maxCoeff(), 1.0);
    auto m = blank_maps(8);
    m.score = t.heatmap;
    const int i = t.row * 8 + t.col;
    m.offset.row(i) << t.offset_x, t.offset_y;
    m.size.row(i) << t.w, t.h;
    const auto d = decode_box(m);
    ASSERT_LT(std::abs(d.box.cx() - gt.cx()), 1.0 / 16);
    ASSERT_LT(std::abs(d.box.cy() - gt.cy()), 1.0 / 16);
    ASSERT_NEAR(d.box.w, gt.w, 1e-12);
    const Box cell = box_at_cell(m, t.row, t.col);
    ASSERT_NEAR(cell.cx(), gt.cx(), 1e-12);
  }
}

TEST(Focal, PerfectPredictionNearZero) {
  Mat<double> target = Mat<double>::Zero(64, 1);
  target(27, 0) = 1;
  EXPECT_LT(focal_loss(Mat<double>(target), target), 1e-6);
}

TEST(Focal, UniformHalfMatchesScalarOracle) {
  KeyedRng rng(4);
  Mat<double> target(50, 1);
  for (int i = 0; i < 50; ++i) target(i, 0) = rng.below(5) == 0 ? 1.0 : rng.uniform();
  const Mat<double> score = Mat<double>::Constant(50, 1, 0.5);
  double sum = 0, pos = 0;
  for (int i = 0; i < 50; ++i) {
    const double y = target(i, 0), p = 0.5;
    if (y == 1) {
      sum += -std::pow(1 - p, 2) * std::log(p);
      pos += 1;
    } else {
      sum += -std::pow(1 - y, 4) * std::pow(p, 2) * std::log(1 - p);
    }
  }
  EXPECT_NEAR(focal_loss(score, target), sum / std::max(1.0, pos), 1e-6);
  EXPECT_THROW(focal_loss(Mat<double>(Mat<double>::Zero(3, 1)), target), ShapeError);
}

TEST(Focal, GradientMatchesFiniteDifference) {
  ParamStore<double> s;
  auto& sc = s.add("score", "head", 36, 1);
  KeyedRng rng(5);
  for (int i = 0; i < 36; ++i) sc.value(i, 0) = rng.uniform(0.02, 0.98);
  const auto t = encode_target({0.4, 0.3, 0.35, 0.4}, 6, 6);
  const auto rep = grad_check(s, [&](ParamStore<double>&, bool g) {
    Mat<double> d;
    const double l = focal_loss(sc.value, t.heatmap, g ? &d : nullptr);
    if (g) sc.grad += d;
    return l;
  }, 1e-4);
  EXPECT_TRUE(rep.pass) << rep.max_rel_error();
}

TEST(BoxLosses, IdenticalBoxesZero) {
  const Box b{0.1, 0.2, 0.3, 0.4};
  EXPECT_EQ(giou_loss(b, b), 0.0);
  EXPECT_EQ(l1_loss(b, b), 0.0);
}

TEST(BoxLosses, DisjointGiouExample) {
  EXPECT_NEAR(giou_loss({0, 0, 1, 1}, {2, 2, 1, 1}), 16.0 / 9.0, 1e-12);
  EXPECT_NEAR(l1_loss({0, 0, 1, 1}, {2, 2, 1, 1}), 2.0, 1e-12);
}

TEST(BoxLosses, GiouSymmetricAndBounded) {
  KeyedRng rng(6);
  for (int i = 0; i < 500; ++i) {
    const Box a = random_box(rng), b = random_box(rng);
    const double ab = giou_loss(a, b), ba = giou_loss(b, a);
    ASSERT_NEAR(ab, ba, 1e-12);
    ASSERT_GE(ab, 0.0);
    ASSERT_LE(ab, 2.0);
    ASSERT_NEAR(l1_loss(a, b), l1_loss(b, a), 1e-15);
  }
}

TEST(Kd, Examples) {
  const Mat<double> a = Mat<double>::Ones(4, 3), z = Mat<double>::Zero(4, 3);
  EXPECT_EQ(kd_loss(a, a), 0.0);
  EXPECT_EQ(kd_loss(a, z), 1.0);
  KeyedRng rng(7);
  Mat<double> x(5, 7), y(5, 7);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x.data()[i] = rng.normal();
    y.data()[i] = rng.normal();
  }
  double sum = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 7; ++j) sum += (x(i, j) - y(i, j)) * (x(i, j) - y(i, j));
  Mat<double> d;
  EXPECT_NEAR(kd_loss(x, y, &d), sum / 35, 1e-12);
  EXPECT_LT((d - (x - y) * (2.0 / 35)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_THROW(kd_loss(x, Mat<double>(Mat<double>::Zero(5, 6))), ShapeError);
}

TEST(Total, DefaultWeightsArithmetic) {
  const LossWeights w;
  EXPECT_EQ(w.focal, 1.0);
  EXPECT_EQ(w.l1, 14.0);
  EXPECT_EQ(w.giou, 1.0);
  EXPECT_EQ(w.kd, 0.1);
  EXPECT_EQ(total_loss(0.5, 0.1, 0.2, 0.3).total, 2.13);
  EXPECT_EQ(total_loss(0, 0, 0, 0).total, 0.0);
  LossWeights stage1 = w;
  stage1.kd = 0;
  EXPECT_EQ(total_loss(0.5, 0.1, 0.2, 0.3, stage1).total, total_loss(0.5, 0.1, 0.2, 0.0).total);
}

TEST(Total, NonFiniteTermNamed) {
  try {
    total_loss(0.1, std::nan(""), 0.2, 0.0);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'l1'"), std::string::npos);
  }
  EXPECT_THROW(total_loss(0.1, 0.1, 0.2, INFINITY), NumericError);
}
