#include "sft/eval.hpp"
#include "sft/verify.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace sft;

namespace {

SequenceRecord ten_window_sequence(std::uint64_t seed) {
  SynthConfig c;
  c.T = 100000;
  c.delta_t = 10000;
  c.vx = 0.4;
  c.seed = seed;
  return generate_sequence(c);
}

}  // namespace

TEST(Metrics, PerfectTrack) {
  const auto rec = ten_window_sequence(1);
  const auto m = compute_metrics(rec.ground_truth, rec.ground_truth);
  EXPECT_DOUBLE_EQ(m.sr, 100);
  EXPECT_DOUBLE_EQ(m.pr, 100);
  EXPECT_DOUBLE_EQ(m.npr, 100);
  EXPECT_EQ(m.success_curve.size(), 21u);
  EXPECT_EQ(m.precision_curve.size(), 51u);
  EXPECT_EQ(m.norm_curve.size(), 51u);
}

TEST(Metrics, FiveWindowExample) {
  const std::vector<double> ious{1, 0.6, 0.4, 0, 0.8}, ce{0, 10, 25, 100, 5};
  const auto m = metrics_from_errors(ious, ce, ce);
  EXPECT_DOUBLE_EQ(m.pr, 60);
  EXPECT_NEAR(m.sr, oracle::success(ious), 1e-12);
  // 4/5 pass thresholds 0..8, 3/5 pass 9..12, 2/5 pass 13..16, 1/5 pass 17..20.
  EXPECT_NEAR(m.sr, 100.0 * (9 * 0.8 + 4 * 0.6 + 4 * 0.4 + 4 * 0.2) / 21, 1e-12);
  EXPECT_DOUBLE_EQ(m.success_curve[0], 0.8);
}

TEST(Metrics, TwentyPixelsIsInclusive) {
  EXPECT_DOUBLE_EQ(metrics_from_errors({0.5}, {20.0}, {0}).pr, 100);
  EXPECT_DOUBLE_EQ(metrics_from_errors({0.5}, {std::nextafter(20.0, 21.0)}, {0}).pr, 0);
  const Box g{10, 10, 10, 10};
  EXPECT_DOUBLE_EQ(compute_metrics({Box{22, 26, 10, 10}}, {g}).pr, 100);  // 3-4-5 triangle, 20 px
}

TEST(Metrics, SuccessIsScaleInvariant) {
  KeyedRng rng(3);
  std::vector<Box> p, g, ps, gs;
  for (int i = 0; i < 40; ++i) {
    const Box a{rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(2, 20), rng.uniform(2, 20)};
    const Box b{a.x + rng.uniform(-6, 6), a.y + rng.uniform(-6, 6), a.w * rng.uniform(0.7, 1.3), a.h};
    p.push_back(b);
    g.push_back(a);
    ps.push_back({b.x * 4, b.y * 4, b.w * 4, b.h * 4});
    gs.push_back({a.x * 4, a.y * 4, a.w * 4, a.h * 4});
  }
  const auto m = compute_metrics(p, g), s = compute_metrics(ps, gs);
  EXPECT_NEAR(m.sr, s.sr, 1e-9);
  EXPECT_NEAR(m.npr, s.npr, 1e-9);
}

TEST(Metrics, CountMismatchRejected) {
  const auto rec = ten_window_sequence(2);
  std::vector<Box> short_pred(rec.ground_truth.begin(), rec.ground_truth.end() - 1);
  EXPECT_THROW(compute_metrics(short_pred, rec.ground_truth), ArgumentError);
  TrackRun run;
  run.k = 3;
  run.boxes = rec.ground_truth;
  EXPECT_THROW(compute_metrics(run, rec), ArgumentError);
  EXPECT_THROW(metrics_from_errors({}, {}, {}), ArgumentError);
}

TEST(Tracking, FastWithThreeOutputsPerWindow) {
  const PreparedSequence seq(ten_window_sequence(4));
  ASSERT_EQ(seq.num_windows(), 10);
  Tracker<float> fast(tiny_model_config(), TrackerKind::fast, 1);
  const auto run = track_sequence(fast, seq, 3);
  std::stringstream ss;
  write_results(ss, run);
  int lines = 0;
  std::string line;
  while (std::getline(ss, line)) ++lines;
  EXPECT_EQ(lines, 30);
  for (int j = 0; j < 3; ++j) EXPECT_EQ(run.boxes[std::size_t(j)].x, seq.record.ground_truth[0].x);
  for (int w = 0; w < 10; ++w)
    for (int j = 1; j <= 3; ++j) EXPECT_EQ(run.t_out_us[std::size_t(w * 3 + j - 1)], w * 10000 + j * 10000 / 3);
  EXPECT_NO_THROW(compute_metrics(run, seq.record));

  std::stringstream back(ss.str());
  const auto rt = read_results(back, 3);
  ASSERT_EQ(rt.boxes.size(), run.boxes.size());
  for (std::size_t i = 0; i < rt.boxes.size(); ++i) {
    EXPECT_NEAR(rt.boxes[i].x, run.boxes[i].x, 1e-6);
    EXPECT_NEAR(rt.boxes[i].h, run.boxes[i].h, 1e-6);
    EXPECT_EQ(rt.t_out_us[i], run.t_out_us[i]);
  }
  std::stringstream bad("1,2,3\n");
  EXPECT_THROW(read_results(bad, 1), ParseError);
}

TEST(Tracking, SlowIgnoresK) {
  const PreparedSequence seq(ten_window_sequence(5));
  Tracker<float> slow(tiny_model_config(), TrackerKind::slow, 1);
  const auto run = track_sequence(slow, seq, 3);
  EXPECT_EQ(run.k, 1);
  EXPECT_EQ(run.boxes.size(), 10u);
  EXPECT_THROW(track_sequence(slow, seq, 0), ArgumentError);
}

TEST(Latency, WarmupExcludedAndPercentiles) {
  EXPECT_DOUBLE_EQ(percentile({4, 1, 3, 2}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4, 5}, 0.95), 4.8);
  const PreparedSequence seq(ten_window_sequence(6));
  Tracker<float> fast(tiny_model_config(), TrackerKind::fast, 2);
  const auto r = bench_latency(fast, seq, 3, 10);
  EXPECT_EQ(r.outputs, 27u);
  EXPECT_GT(r.median_us, 0);
  EXPECT_GE(r.p95_us, r.median_us);
  EXPECT_GT(r.flops_per_output, 0);
}

TEST(Flops, LayerCountersMatchClosedForms) {
  ParamStore<double> s;
  Linear<double> lin(s, "l", "vit", 7, 5);
  FlopCounter fc;
  lin.forward(Mat<double>::Zero(3, 7), &fc);
  EXPECT_EQ(fc.total, 2u * 3 * 7 * 5 + 3 * 5);

  AttentionBlock<double> blk(s, "b", "vit", 8, 2, 4);
  typename AttentionBlock<double>::Cache c;
  fc.total = 0;
  blk.forward(Mat<double>::Zero(6, 8), c, &fc);
  const std::uint64_t n = 6, d = 8, h = 32;
  EXPECT_EQ(fc.total, (2 * n * d * 3 * d + n * 3 * d) + 4 * n * n * d + (2 * n * d * d + n * d) +
                          (2 * n * d * h + n * h) + (2 * n * h * d + n * d));
  EXPECT_EQ(knn_flops(10), 8u * 45);
}

TEST(Flops, FastVisualAndHeadClosedForm) {
  const ModelConfig m = tiny_model_config();
  Tracker<double> fast(m, TrackerKind::fast, 3);
  const Image z(3, m.template_size, m.template_size), x(3, m.search_size, m.search_size);
  FlopCounter vis;
  const auto tok = fast.visual_tokens(z, x, &vis);
  const std::uint64_t n = std::uint64_t(m.tokens_template() + m.tokens_search()), c = std::uint64_t(m.embed_dim);
  const std::uint64_t pin = 3 * std::uint64_t(m.patch_size * m.patch_size);
  const std::uint64_t embed = 2 * n * pin * c + n * c;
  const std::uint64_t block = AttentionBlock<double>::flops(n, c, c * std::uint64_t(m.mlp_ratio));
  EXPECT_EQ(vis.total, embed + std::uint64_t(m.depth_fast) * block);

  FlopCounter head;
  const RowVec<double> g = RowVec<double>::Zero(m.embed_dim);
  fast.head_from_visual(tok, &g, &head);
  const std::uint64_t hw = std::uint64_t(m.map_size() * m.map_size());
  const std::uint64_t c2 = std::max<std::uint64_t>(1, c / 2), c4 = std::max<std::uint64_t>(1, c / 4);
  std::uint64_t convs = 0;
  for (std::uint64_t out : {1u, 2u, 2u})
    convs += 2 * hw * 9 * (c * c2 + c2 * c4 + c4 * out) + hw * (c2 + c4 + out);
  EXPECT_EQ(head.total, 2 * n * c + convs);
}
