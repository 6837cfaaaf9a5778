#pragma once

#include "sft/common.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace sft {

inline constexpr double kFocalAlpha = 2.0;
inline constexpr double kFocalBeta = 4.0;
inline constexpr double kScoreClamp = 1e-4;

/// Penalty-reduced pixelwise focal loss, normalised by the number of positive cells (target == 1).
/// Predictions are clamped to [1e-4, 1 - 1e-4]; the clamp carries zero gradient.
template <typename S>
double focal_loss(const Mat<S>& score, const Mat<double>& target, Mat<S>* dscore = nullptr) {
  if (score.rows() != target.rows() || score.cols() != target.cols())
    throw ShapeError(detail::cat("focal_loss: score ", score.rows(), "x", score.cols(), " vs target ",
                                 target.rows(), "x", target.cols()));
  double num_pos = 0;
  for (Eigen::Index i = 0; i < target.size(); ++i) num_pos += target.data()[i] == 1.0 ? 1 : 0;
  const double norm = std::max(1.0, num_pos);
  double loss = 0;
  if (dscore) *dscore = Mat<S>::Zero(score.rows(), score.cols());
  for (Eigen::Index i = 0; i < score.size(); ++i) {
    const double raw = double(score.data()[i]);
    const double p = std::clamp(raw, kScoreClamp, 1 - kScoreClamp);
    const bool clamped = p != raw;
    const double y = target.data()[i];
    double l, dl;
    if (y == 1.0) {
      const double om = 1 - p;
      l = -om * om * std::log(p);
      dl = 2 * om * std::log(p) - om * om / p;
    } else {
      const double w = std::pow(1 - y, kFocalBeta);
      l = -w * p * p * std::log(1 - p);
      dl = -w * (2 * p * std::log(1 - p) - p * p / (1 - p));
    }
    loss += l;
    if (dscore && !clamped) dscore->data()[i] = S(dl / norm);
  }
  return loss / norm;
}

/// Mean absolute difference over the corner coordinates (x1, y1, x2, y2).
inline double l1_loss(const Box& pred, const Box& gt, std::array<double, 4>* dpred = nullptr) {
  const std::array<double, 4> p{pred.x, pred.y, pred.x2(), pred.y2()};
  const std::array<double, 4> g{gt.x, gt.y, gt.x2(), gt.y2()};
  double l = 0;
  for (int i = 0; i < 4; ++i) {
    const double d = p[std::size_t(i)] - g[std::size_t(i)];
    l += std::abs(d);
    if (dpred) (*dpred)[std::size_t(i)] = d > 0 ? 0.25 : (d < 0 ? -0.25 : 0.0);
  }
  return l / 4;
}

/// 1 - GIoU, with the gradient w.r.t. the predicted corners (x1, y1, x2, y2).
inline double giou_loss(const Box& pred, const Box& gt, std::array<double, 4>* dpred = nullptr) {
  const double x1 = pred.x, y1 = pred.y, x2 = pred.x2(), y2 = pred.y2();
  const double X1 = gt.x, Y1 = gt.y, X2 = gt.x2(), Y2 = gt.y2();
  const double ap = (x2 - x1) * (y2 - y1);
  const double ag = (X2 - X1) * (Y2 - Y1);
  const double iw_raw = std::min(x2, X2) - std::max(x1, X1);
  const double ih_raw = std::min(y2, Y2) - std::max(y1, Y1);
  const double iw = std::max(0.0, iw_raw), ih = std::max(0.0, ih_raw);
  const double inter = iw * ih;
  const double uni = ap + ag - inter;
  const double cw = std::max(x2, X2) - std::min(x1, X1);
  const double ch = std::max(y2, Y2) - std::min(y1, Y1);
  const double hull = cw * ch;
  constexpr double eps = 1e-12;
  const double u = std::max(uni, eps), c = std::max(hull, eps);
  const double iou_v = inter / u;
  const double loss = 1 - (iou_v - (c - u) / c);
  if (dpred) {
    // d(area_pred)
    const std::array<double, 4> dap{-(y2 - y1), -(x2 - x1), (y2 - y1), (x2 - x1)};
    // d(intersection)
    std::array<double, 4> di{0, 0, 0, 0};
    if (iw_raw > 0 && ih_raw > 0) {
      di[0] = x1 > X1 ? -ih : 0;
      di[2] = x2 < X2 ? ih : 0;
      di[1] = y1 > Y1 ? -iw : 0;
      di[3] = y2 < Y2 ? iw : 0;
    }
    // d(hull)
    std::array<double, 4> dc{x1 < X1 ? -ch : 0, y1 < Y1 ? -cw : 0, x2 > X2 ? ch : 0, y2 > Y2 ? cw : 0};
    for (std::size_t i = 0; i < 4; ++i) {
      const double du = dap[i] - di[i];
      const double diou = (di[i] * u - inter * du) / (u * u);
      // loss = 2 - iou - u / c
      const double duc = (du * c - u * dc[i]) / (c * c);
      (*dpred)[i] = -diou - duc;
    }
  }
  return loss;
}

/// Mean squared elementwise difference; gradient flows into the student only.
template <typename S>
double kd_loss(const Mat<S>& student, const Mat<S>& teacher, Mat<S>* dstudent = nullptr) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols())
    throw ShapeError(detail::cat("kd_loss: student ", student.rows(), "x", student.cols(), " vs teacher ",
                                 teacher.rows(), "x", teacher.cols()));
  const double n = double(student.size());
  if (n == 0) return 0;
  const Mat<S> diff = student - teacher;
  double sum = 0;
  for (Eigen::Index i = 0; i < diff.size(); ++i) sum += double(diff.data()[i]) * double(diff.data()[i]);
  if (dstudent) *dstudent = diff * S(2.0 / n);
  return sum / n;
}

struct LossWeights {
  double focal = 1.0;
  double l1 = 14.0;
  double giou = 1.0;
  double kd = 0.1;
};

struct LossBundle {
  double focal = 0, l1 = 0, giou = 0, kd = 0;
  LossWeights weights;
  double total = 0;
};

/// L_total = w1 L_focal + w2 L_1 + w3 L_GIoU + w4 L_KD.
inline LossBundle total_loss(double focal, double l1, double giou, double kd, const LossWeights& w = {}) {
  const std::pair<const char*, double> terms[] = {{"focal", focal}, {"l1", l1}, {"giou", giou}, {"kd", kd}};
  for (auto [name, v] : terms)
    if (!std::isfinite(v)) throw NumericError(detail::cat("loss term '", name, "' is not finite"));
  LossBundle b{focal, l1, giou, kd, w, 0};
  b.total = w.focal * focal + w.l1 * l1 + w.giou * giou + w.kd * kd;
  return b;
}

}  // namespace sft
