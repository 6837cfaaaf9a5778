#include "sft/checkpoint.hpp"
#include "sft/graph.hpp"
#include "sft/nn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

using namespace sft;

namespace {

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, KeyedRng& rng, double scale = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

void randomize(ParamStore<double>& store, KeyedRng& rng, double scale) {
  for (auto* p : store.params())
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = scale * rng.normal();
}

Mat<double> layer_norm_oracle(const Mat<double>& x, const Mat<double>& g, const Mat<double>& b) {
  Mat<double> y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mean = 0, var = 0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) mean += x(i, j);
    mean /= double(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= double(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) y(i, j) = (x(i, j) - mean) / std::sqrt(var + 1e-6) * g(0, j) + b(0, j);
  }
  return y;
}

Mat<double> affine(const Mat<double>& x, const Param<double>& w, const Param<double>& b) {
  Mat<double> y = x * w.value;
  for (Eigen::Index i = 0; i < y.rows(); ++i) y.row(i) += b.value.row(0);
  return y;
}

EventGraph path_graph(int n) {
  EventStream s{{}, 100, {8, 8}};
  for (int i = 0; i < n; ++i) s.points.push_back({i, i, 0, 1});
  EventGraph g = build_knn_graph(s, 1, s.sensor, s.T);
  std::vector<std::pair<int, int>> e;
  for (int i = 0; i + 1 < n; ++i) e.emplace_back(i, i + 1);
  g.set_edges(e);
  return g;
}

}  // namespace

TEST(ParamStoreTest, DuplicateNamesRejected) {
  ParamStore<float> s;
  s.add("a", "g", 2, 2);
  EXPECT_THROW(s.add("a", "g", 1, 1), ConfigError);
  EXPECT_EQ(s.num_parameters(), 4u);
}

TEST(ParamStoreTest, TruncatedNormalInit) {
  ParamStore<double> s;
  auto& p = s.add("w", "g", 100, 100);
  KeyedRng rng(1);
  init_trunc_normal(p, 0.02, rng);
  EXPECT_LE(p.value.cwiseAbs().maxCoeff(), 0.04);
  EXPECT_NEAR(p.value.mean(), 0.0, 1e-3);
  const double sd = std::sqrt((p.value.array() - p.value.mean()).square().mean());
  EXPECT_NEAR(sd, 0.02 * 0.8796, 1e-3);  // std of N(0,1) truncated at +-2
}

TEST(AttentionBlockTest, ZeroedResidualBranchesAreIdentity) {
  ParamStore<double> s;
  AttentionBlock<double> blk(s, "b", "vit", 8, 2);
  KeyedRng rng(2);
  randomize(s, rng, 0.5);
  blk.proj.weight->value.setZero();
  blk.proj.bias->value.setZero();
  blk.fc2.weight->value.setZero();
  blk.fc2.bias->value.setZero();
  const Mat<double> x = random_mat(5, 8, rng);
  AttentionBlock<double>::Cache c;
  EXPECT_EQ(blk.forward(x, c), x);
}

TEST(AttentionBlockTest, SingleTokenClosedForm) {
  ParamStore<double> s;
  AttentionBlock<double> blk(s, "b", "vit", 6, 1);
  KeyedRng rng(3);
  randomize(s, rng, 0.4);
  const Mat<double> x = random_mat(1, 6, rng);
  AttentionBlock<double>::Cache c;
  const Mat<double> y = blk.forward(x, c);
  EXPECT_DOUBLE_EQ(c.probs[0](0, 0), 1.0);

  const Mat<double> h1 = layer_norm_oracle(x, blk.norm1.gamma->value, blk.norm1.beta->value);
  const Mat<double> v = affine(h1, *blk.qkv.weight, *blk.qkv.bias).rightCols(6);
  const Mat<double> x1 = x + affine(v, *blk.proj.weight, *blk.proj.bias);
  const Mat<double> h2 = layer_norm_oracle(x1, blk.norm2.gamma->value, blk.norm2.beta->value);
  Mat<double> f = affine(h2, *blk.fc1.weight, *blk.fc1.bias);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = 0.5 * f.data()[i] * (1 + std::erf(f.data()[i] / std::sqrt(2.0)));
  const Mat<double> expect = x1 + affine(f, *blk.fc2.weight, *blk.fc2.bias);
  EXPECT_LT((y - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(AttentionBlockTest, RowsSumToOneAndPermutationEquivariant) {
  ParamStore<double> s;
  AttentionBlock<double> blk(s, "b", "vit", 8, 4);
  KeyedRng rng(4);
  randomize(s, rng, 0.3);
  const Mat<double> x = random_mat(7, 8, rng);
  AttentionBlock<double>::Cache c;
  const Mat<double> y = blk.forward(x, c);
  for (const auto& p : c.probs)
    for (Eigen::Index i = 0; i < p.rows(); ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-6);

  std::vector<int> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Mat<double> xp(7, 8);
  for (int i = 0; i < 7; ++i) xp.row(i) = x.row(perm[std::size_t(i)]);
  const Mat<double> yp = blk.forward(xp, c);
  for (int i = 0; i < 7; ++i) EXPECT_LT((yp.row(i) - y.row(perm[std::size_t(i)])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(AttentionBlockTest, ShapeErrors) {
  ParamStore<double> s;
  EXPECT_THROW(AttentionBlock<double>(s, "bad", "vit", 10, 3), ConfigError);
  AttentionBlock<double> blk(s, "b", "vit", 8, 2);
  AttentionBlock<double>::Cache c;
  try {
    blk.forward(Mat<double>::Zero(3, 5), c);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("width 5"), std::string::npos);
  }
}

TEST(AttentionBlockTest, FiniteDifferenceGradients) {
  ParamStore<double> s;
  AttentionBlock<double> blk(s, "b", "vit", 8, 2);
  auto& x = s.add("x", "in", 5, 8);
  KeyedRng rng(5);
  randomize(s, rng, 0.5);
  const Mat<double> r = random_mat(5, 8, rng);
  const auto rep = grad_check(s, [&](ParamStore<double>&, bool g) {
    AttentionBlock<double>::Cache c;
    const Mat<double> y = blk.forward(x.value, c);
    if (g) x.grad += blk.backward(c, r);
    return (y.array() * r.array()).sum();
  }, 1e-4);
  EXPECT_TRUE(rep.pass) << rep.max_rel_error();
}

TEST(GcnLayerTest, SingleNodeIdentity) {
  EventStream st{{{0, 1, 1, 1}}, 10, {4, 4}};
  const EventGraph g = build_radius_graph(st, 0.0, st.sensor, st.T);
  const NormalizedAdjacency adj(g);
  ParamStore<double> s;
  GcnLayer<double> layer(s, "gcn", "gcn", 3, 3, false);
  layer.lin.weight->value.setIdentity();
  Mat<double> h(1, 3);
  h << 0.5, -2, 7;
  GcnLayer<double>::Cache c;
  EXPECT_EQ(layer.forward(adj, h, c), h);
}

TEST(GcnLayerTest, PathGraphDenseOracle) {
  const EventGraph g = path_graph(5);
  ASSERT_EQ(g.edges.size(), 4u);
  const NormalizedAdjacency adj(g);
  ParamStore<double> s;
  GcnLayer<double> layer(s, "gcn", "gcn", 3, 4);
  KeyedRng rng(6);
  randomize(s, rng, 1.0);
  const Mat<double> h = random_mat(5, 3, rng);

  Mat<double> a = g.dense_adjacency().cast<double>() + Mat<double>::Identity(5, 5);
  Eigen::VectorXd dinv(5);
  for (int i = 0; i < 5; ++i) dinv(i) = 1.0 / std::sqrt(a.row(i).sum());
  const Mat<double> norm = dinv.asDiagonal() * a * dinv.asDiagonal();
  Mat<double> expect = norm * h * layer.lin.weight->value;
  for (int i = 0; i < 5; ++i) expect.row(i) += layer.lin.bias->value.row(0);
  expect = expect.cwiseMax(0.0);

  GcnLayer<double>::Cache c;
  EXPECT_LT((layer.forward(adj, h, c) - expect).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(GcnLayerTest, PermutationEquivariant) {
  EventStream st{{}, 1000, {16, 16}};
  KeyedRng rng(7);
  for (int i = 0; i < 12; ++i) st.points.push_back({i * 50, int(rng.below(16)), int(rng.below(16)), 1});
  const EventGraph g = build_knn_graph(st, 3, st.sensor, st.T);
  std::vector<int> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> inv(12);
  for (int i = 0; i < 12; ++i) inv[std::size_t(perm[std::size_t(i)])] = i;
  EventGraph gp = g;
  std::vector<std::pair<int, int>> e;
  for (auto [i, j] : g.edges) e.emplace_back(inv[std::size_t(i)], inv[std::size_t(j)]);
  gp.set_edges(e);

  ParamStore<double> s;
  GcnLayer<double> layer(s, "gcn", "gcn", 2, 5);
  randomize(s, rng, 1.0);
  const Mat<double> h = random_mat(12, 2, rng);
  Mat<double> hp(12, 2);
  for (int i = 0; i < 12; ++i) hp.row(i) = h.row(perm[std::size_t(i)]);
  GcnLayer<double>::Cache c;
  const Mat<double> y = layer.forward(NormalizedAdjacency(g), h, c);
  const Mat<double> yp = layer.forward(NormalizedAdjacency(gp), hp, c);
  for (int i = 0; i < 12; ++i) EXPECT_LT((yp.row(i) - y.row(perm[std::size_t(i)])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GcnLayerTest, FiniteDifferenceGradients) {
  const EventGraph g = path_graph(6);
  const NormalizedAdjacency adj(g);
  ParamStore<double> s;
  GcnLayer<double> layer(s, "gcn", "gcn", 3, 4);
  auto& h = s.add("h", "in", 6, 3);
  KeyedRng rng(8);
  randomize(s, rng, 0.8);
  const Mat<double> r = random_mat(6, 4, rng);
  const auto rep = grad_check(s, [&](ParamStore<double>&, bool grad) {
    GcnLayer<double>::Cache c;
    const Mat<double> y = layer.forward(adj, h.value, c);
    if (grad) h.grad += layer.backward(adj, c, r);
    return (y.array() * r.array()).sum();
  }, 1e-4);
  EXPECT_TRUE(rep.pass) << rep.max_rel_error();
  GcnLayer<double>::Cache c;
  EXPECT_THROW(layer.forward(adj, Mat<double>::Zero(5, 3), c), ShapeError);
}

TEST(GradCheck, LinearLayerTight) {
  ParamStore<double> s;
  Linear<double> lin(s, "lin", "g", 4, 3);
  auto& x = s.add("x", "in", 2, 4);
  KeyedRng rng(9);
  randomize(s, rng, 1.0);
  const Mat<double> r = random_mat(2, 3, rng);
  const auto rep = grad_check(s, [&](ParamStore<double>&, bool g) {
    const Mat<double> y = lin.forward(x.value);
    if (g) x.grad += lin.backward(x.value, r);
    return (y.array() * r.array()).sum();
  }, 1e-6);
  EXPECT_TRUE(rep.pass) << rep.max_rel_error();
}

TEST(GradCheck, CorruptedGradientIsReported) {
  ParamStore<double> s;
  Linear<double> lin(s, "lin", "g", 4, 3);
  auto& x = s.add("x", "in", 2, 4);
  KeyedRng rng(10);
  randomize(s, rng, 1.0);
  const Mat<double> r = random_mat(2, 3, rng);
  const auto rep = grad_check(s, [&](ParamStore<double>&, bool g) {
    const Mat<double> y = lin.forward(x.value);
    if (g) {
      x.grad += lin.backward(x.value, r);
      lin.bias->grad(0, 1) += 0.5;
    }
    return (y.array() * r.array()).sum();
  }, 1e-4);
  EXPECT_FALSE(rep.pass);
  EXPECT_FALSE(rep.find("lin.bias")->pass);
  EXPECT_TRUE(rep.find("lin.weight")->pass);
  EXPECT_TRUE(rep.find("x")->pass);
}

TEST(GradCheck, TestSideFiniteDifferenceOnLayerNorm) {
  ParamStore<double> s;
  LayerNorm<double> ln(s, "ln", "g", 5);
  KeyedRng rng(11);
  randomize(s, rng, 1.0);
  const Mat<double> x = random_mat(3, 5, rng), r = random_mat(3, 5, rng);
  auto loss = [&](const Mat<double>& xx) {
    typename LayerNorm<double>::Cache c;
    return (ln.forward(xx, c).array() * r.array()).sum();
  };
  typename LayerNorm<double>::Cache c;
  ln.forward(x, c);
  const Mat<double> dx = ln.backward(c, r);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Mat<double> xp = x, xm = x;
    xp.data()[i] += 1e-6;
    xm.data()[i] -= 1e-6;
    EXPECT_NEAR((loss(xp) - loss(xm)) / 2e-6, dx.data()[i], 1e-6);
  }
}

TEST(AdamWTest, HandComputedStep) {
  ParamStore<double> s;
  auto& w = s.add("w", "g", 1, 1);
  w.value(0, 0) = 1.0;
  AdamW<double> opt({0.1, 0.9, 0.999, 1e-8, 0.0, {}});
  s.zero_grad();
  w.grad(0, 0) = w.value(0, 0);  // d/dw of w^2/2
  opt.step(s);
  const double m = 0.1 * 1.0, v = 0.001 * 1.0;
  const double mhat = m / (1 - 0.9), vhat = v / (1 - 0.999);
  EXPECT_NEAR(w.value(0, 0), 1.0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8), 1e-12);
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(AdamWTest, DefaultWeightDecay) { EXPECT_EQ(AdamWConfig{}.weight_decay, 1e-4); }

TEST(AdamWTest, FrozenGroupBitIdentical) {
  ParamStore<float> s;
  auto& a = s.add("a", "vit", 3, 3);
  auto& b = s.add("b", "head", 3, 3);
  a.value.setConstant(0.5f);
  b.value.setConstant(0.5f);
  s.set_frozen("vit", true);
  s.zero_grad();
  a.grad.setConstant(1.f);
  b.grad.setConstant(1.f);
  const Mat<float> before = a.value;
  AdamW<float> opt;
  opt.step(s);
  EXPECT_EQ(a.value, before);
  EXPECT_NE(b.value, before);
}

TEST(AdamWTest, ZeroRateIsIdentityAndGroupRates) {
  ParamStore<double> s;
  auto& a = s.add("a", "vit", 4, 4);
  auto& b = s.add("b", "gcn", 4, 4);
  KeyedRng rng(12);
  randomize(s, rng, 1.0);
  const Mat<double> a0 = a.value, b0 = b.value;
  AdamW<double> opt({0.0, 0.9, 0.999, 1e-8, 0.0, {{"gcn", 1e-3}}});
  for (int i = 0; i < 3; ++i) {
    s.zero_grad();
    a.grad = random_mat(4, 4, rng);
    b.grad = random_mat(4, 4, rng);
    opt.step(s);
  }
  EXPECT_EQ(a.value, a0);
  EXPECT_NE(b.value, b0);
  EXPECT_EQ(opt.lr_for("gcn"), 1e-3);
}

TEST(AdamWTest, NonFiniteGradientNamesParameter) {
  ParamStore<double> s;
  s.add("ok", "g", 1, 2);
  auto& bad = s.add("broken.weight", "g", 1, 2);
  s.zero_grad();
  bad.grad(0, 1) = std::nan("");
  AdamW<double> opt;
  try {
    opt.step(s);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("broken.weight"), std::string::npos);
  }
  EXPECT_EQ(opt.step_count(), 0);
}

TEST(Checkpoint, RoundTripAndValidation) {
  ParamStore<float> s;
  auto& a = s.add("a", "vit", 2, 3);
  auto& b = s.add("b", "head", 1, 4);
  KeyedRng rng(13);
  init_trunc_normal(a, 1.0, rng);
  init_trunc_normal(b, 1.0, rng);
  AdamW<float> opt;
  s.zero_grad();
  a.grad.setConstant(0.1f);
  opt.step(s);
  const auto path = std::filesystem::temp_directory_path() / "sft_nn_ckpt.bin";
  save_checkpoint(path, s, 1234, {{"note", "x"}}, &opt);

  ParamStore<float> t;
  t.add("a", "vit", 2, 3);
  t.add("b", "head", 1, 4);
  const auto ck = read_checkpoint(path);
  EXPECT_EQ(ck.meta["note"], "x");
  load_params(ck, t, 1234);
  EXPECT_EQ(t.hash(), s.hash());
  AdamW<float> opt2;
  load_optimizer(ck, t, opt2);
  EXPECT_EQ(opt2.step_count(), 1);
  EXPECT_EQ(opt2.state().at("a").m, opt.state().at("a").m);

  EXPECT_THROW(load_params(ck, t, 999), ConfigError);
  ParamStore<float> wrong;
  wrong.add("a", "vit", 3, 2);
  wrong.add("b", "head", 1, 4);
  EXPECT_THROW(load_params(ck, wrong, 1234), ShapeError);
  ParamStore<float> extra;
  extra.add("c", "vit", 1, 1);
  EXPECT_THROW(load_params(ck, extra, 0), ConfigError);
  std::filesystem::remove(path);
}
