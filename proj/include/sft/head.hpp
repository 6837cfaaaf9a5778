#pragma once

#include "sft/common.hpp"
#include "sft/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace sft {

/// Response maps over the H_m x W_m search grid; rows of each matrix are cells in raster order.
template <typename S>
struct HeadMaps {
  int height = 0, width = 0;
  Mat<S> score;   // HW x 1, in [0,1]
  Mat<S> offset;  // HW x 2 (x, y), in [0,1)
  Mat<S> size;    // HW x 2 (w, h), normalised by the crop side

  static HeadMaps zeros_like(const HeadMaps& m) {
    HeadMaps z;
    z.height = m.height;
    z.width = m.width;
    z.score = Mat<S>::Zero(m.score.rows(), m.score.cols());
    z.offset = Mat<S>::Zero(m.offset.rows(), m.offset.cols());
    z.size = Mat<S>::Zero(m.size.rows(), m.size.cols());
    return z;
  }
};

/// Three branches (score, offset, size), each conv3x3 C -> C/2 -> C/4 -> out with ReLU between
/// and a sigmoid on the output.
template <typename S>
class CenterHead {
 public:
  struct Branch {
    Conv3x3<S> c1, c2, c3;
  };
  struct BranchCache {
    Mat<S> col1, col2, col3, z1, z2, out;  // out is post-sigmoid
  };
  struct Cache {
    std::array<BranchCache, 3> branch;
  };

  CenterHead() = default;
  CenterHead(ParamStore<S>& store, const std::string& name, const std::string& group, int dim, int map_size)
      : map_(map_size) {
    const char* names[3] = {"score", "offset", "size"};
    const int outs[3] = {1, 2, 2};
    const int c2 = std::max(1, dim / 2), c4 = std::max(1, dim / 4);
    for (int b = 0; b < 3; ++b) {
      const std::string n = name + "." + names[b];
      branches_[std::size_t(b)] = {Conv3x3<S>(store, n + ".conv1", group, dim, c2, map_size, map_size),
                                   Conv3x3<S>(store, n + ".conv2", group, c2, c4, map_size, map_size),
                                   Conv3x3<S>(store, n + ".conv3", group, c4, outs[b], map_size, map_size)};
    }
  }

  int map_size() const { return map_; }
  const std::array<Branch, 3>& branches() const { return branches_; }

  static std::uint64_t flops(std::uint64_t map, std::uint64_t dim) {
    const std::uint64_t hw = map * map, c2 = std::max<std::uint64_t>(1, dim / 2), c4 = std::max<std::uint64_t>(1, dim / 4);
    std::uint64_t f = 0;
    for (std::uint64_t out : {1u, 2u, 2u})
      f += Conv3x3<S>::flops(hw, dim, c2) + Conv3x3<S>::flops(hw, c2, c4) + Conv3x3<S>::flops(hw, c4, out);
    return f;
  }

  HeadMaps<S> forward(const Mat<S>& tokens, Cache& cache, FlopCounter* fc = nullptr) const {
    const auto side = static_cast<Eigen::Index>(std::llround(std::sqrt(double(tokens.rows()))));
    if (side * side != tokens.rows())
      throw ShapeError(detail::cat("head: ", tokens.rows(), " search tokens do not form a square grid"));
    if (side != map_)
      throw ShapeError(detail::cat("head: search grid ", side, "x", side, ", expected ", map_, "x", map_));
    HeadMaps<S> maps;
    maps.height = maps.width = map_;
    for (int b = 0; b < 3; ++b) {
      const auto& br = branches_[std::size_t(b)];
      auto& bc = cache.branch[std::size_t(b)];
      bc.z1 = br.c1.forward(tokens, bc.col1, fc).cwiseMax(S(0));
      bc.z2 = br.c2.forward(bc.z1, bc.col2, fc).cwiseMax(S(0));
      bc.out = br.c3.forward(bc.z2, bc.col3, fc).unaryExpr([](S v) { return S(1) / (S(1) + std::exp(-v)); });
    }
    maps.score = cache.branch[0].out;
    maps.offset = cache.branch[1].out;
    maps.size = cache.branch[2].out;
    return maps;
  }

  /// d_maps holds dL/d(post-sigmoid maps). Returns dL/dtokens.
  Mat<S> backward(const Cache& cache, const HeadMaps<S>& d_maps) const {
    const Mat<S>* grads[3] = {&d_maps.score, &d_maps.offset, &d_maps.size};
    Mat<S> dtokens;
    for (int b = 0; b < 3; ++b) {
      const auto& br = branches_[std::size_t(b)];
      const auto& bc = cache.branch[std::size_t(b)];
      const Mat<S> dz3 = (grads[b]->array() * bc.out.array() * (S(1) - bc.out.array())).matrix();
      Mat<S> d2 = br.c3.backward(bc.col3, dz3);
      d2 = (bc.z2.array() > S(0)).select(d2, S(0));
      Mat<S> d1 = br.c2.backward(bc.col2, d2);
      d1 = (bc.z1.array() > S(0)).select(d1, S(0));
      Mat<S> dt = br.c1.backward(bc.col1, d1);
      if (b == 0) dtokens = std::move(dt);
      else dtokens += dt;
    }
    return dtokens;
  }

 private:
  int map_ = 0;
  std::array<Branch, 3> branches_;
};

struct DecodedBox {
  Box box;  // crop-normalised, top-left corner + size
  double confidence = 0;
  int row = 0, col = 0;
};

/// Peak of the score map (ties -> lowest raster index), refined by the offset and size maps.
template <typename S>
DecodedBox decode_box(const HeadMaps<S>& maps) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < maps.score.rows(); ++i)
    if (maps.score(i, 0) > maps.score(best, 0)) best = i;
  DecodedBox d;
  d.row = int(best / maps.width);
  d.col = int(best % maps.width);
  d.confidence = double(maps.score(best, 0));
  const double cx = (d.col + double(maps.offset(best, 0))) / maps.width;
  const double cy = (d.row + double(maps.offset(best, 1))) / maps.height;
  d.box = Box::from_center(cx, cy, double(maps.size(best, 0)), double(maps.size(best, 1)));
  return d;
}

/// Box read out of the maps at a given cell.
template <typename S>
Box box_at_cell(const HeadMaps<S>& maps, int row, int col) {
  const Eigen::Index i = Eigen::Index(row) * maps.width + col;
  const double cx = (col + double(maps.offset(i, 0))) / maps.width;
  const double cy = (row + double(maps.offset(i, 1))) / maps.height;
  return Box::from_center(cx, cy, double(maps.size(i, 0)), double(maps.size(i, 1)));
}

/// Chains a gradient w.r.t. the corners (x1, y1, x2, y2) of box_at_cell back into the maps.
template <typename S>
void box_corner_grad_to_maps(const std::array<double, 4>& dcorners, int row, int col, HeadMaps<S>& d_maps) {
  const Eigen::Index i = Eigen::Index(row) * d_maps.width + col;
  d_maps.offset(i, 0) += S((dcorners[0] + dcorners[2]) / d_maps.width);
  d_maps.offset(i, 1) += S((dcorners[1] + dcorners[3]) / d_maps.height);
  d_maps.size(i, 0) += S(0.5 * (dcorners[2] - dcorners[0]));
  d_maps.size(i, 1) += S(0.5 * (dcorners[3] - dcorners[1]));
}

// ---------------------------------------------------------------------------
// Target encoding

/// Radius such that a box shifted by it keeps IoU >= min_overlap with the original.
inline double gaussian_radius(double height, double width, double min_overlap = 0.7) {
  const double b1 = height + width;
  const double c1 = width * height * (1 - min_overlap) / (1 + min_overlap);
  const double r1 = (b1 + std::sqrt(b1 * b1 - 4 * c1)) / 2;
  const double a2 = 4, b2 = 2 * (height + width), c2 = (1 - min_overlap) * width * height;
  const double r2 = (b2 + std::sqrt(b2 * b2 - 4 * a2 * c2)) / 2;
  const double a3 = 4 * min_overlap, b3 = -2 * min_overlap * (height + width), c3 = (min_overlap - 1) * width * height;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4 * a3 * c3)) / 2;
  return std::min({r1, r2, r3});
}

struct TargetMaps {
  int height = 0, width = 0;
  Mat<double> heatmap;  // HW x 1, peak exactly 1 at the centre cell
  int row = 0, col = 0;
  double offset_x = 0, offset_y = 0;
  double w = 0, h = 0;
};

/// Gaussian-splatted centre heatmap plus the regression targets of a crop-normalised box.
inline TargetMaps encode_target(const Box& gt, int height, int width) {
  TargetMaps t;
  t.height = height;
  t.width = width;
  const double fx = std::clamp(gt.cx(), 0.0, 1.0 - 1e-9) * width;
  const double fy = std::clamp(gt.cy(), 0.0, 1.0 - 1e-9) * height;
  t.col = int(std::floor(fx));
  t.row = int(std::floor(fy));
  t.offset_x = fx - t.col;
  t.offset_y = fy - t.row;
  t.w = gt.w;
  t.h = gt.h;
  const int radius = std::max(0, int(gaussian_radius(gt.h * height, gt.w * width)));
  const double sigma = (2.0 * radius + 1) / 6.0;
  t.heatmap = Mat<double>::Zero(Eigen::Index(height) * width, 1);
  for (int r = std::max(0, t.row - radius); r <= std::min(height - 1, t.row + radius); ++r)
    for (int c = std::max(0, t.col - radius); c <= std::min(width - 1, t.col + radius); ++c) {
      const double d2 = double((r - t.row) * (r - t.row) + (c - t.col) * (c - t.col));
      t.heatmap(r * width + c, 0) = std::exp(-d2 / (2 * sigma * sigma));
    }
  return t;
}

}  // namespace sft
