#pragma once

#include "sft/common.hpp"
#include "sft/event_io.hpp"
#include "sft/fusion.hpp"
#include "sft/nn.hpp"

#include <array>
#include <string>
#include <vector>

namespace sft {

/// Non-overlapping P x P patches, flattened channel-major (c, py, px), rows in raster order.
template <typename S>
Mat<S> extract_patches(const Image& img, int patch) {
  if (patch <= 0 || img.height % patch != 0 || img.width % patch != 0)
    throw ShapeError(detail::cat("extract_patches: ", img.height, "x", img.width, " not divisible by patch ", patch));
  const int gh = img.height / patch, gw = img.width / patch;
  Mat<S> out(Eigen::Index(gh) * gw, Eigen::Index(img.channels) * patch * patch);
  for (int r = 0; r < gh; ++r)
    for (int c = 0; c < gw; ++c)
      for (int ch = 0; ch < img.channels; ++ch)
        for (int py = 0; py < patch; ++py)
          for (int px = 0; px < patch; ++px)
            out(r * gw + c, (ch * patch + py) * patch + px) = S(img.at(ch, r * patch + py, c * patch + px));
  return out;
}

/// Backbone input and bookkeeping: [template | search | appended graph tokens].
template <typename S>
struct TokenState {
  Mat<S> x;
  int n_template = 0;
  int n_search = 0;
  std::vector<int> appended;  // rows holding appended graph tokens
  std::vector<Mat<S>> taps;   // snapshots after the tap blocks

  int n_base() const { return n_template + n_search; }
};

/// Blocks after which depth taps are recorded: ceil(d/3), ceil(2d/3), d.
inline std::array<int, 3> tap_depths(int depth) { return {(depth + 2) / 3, (2 * depth + 2) / 3, depth}; }

template <typename S>
class Backbone {
 public:
  struct Step {
    enum Kind { block, gate, append } kind;
    int index;  // block index or pyramid level (0-based)
    Mat<S> input;  // gate input tokens
    RowVec<S> g;   // gate vector
  };
  struct Cache {
    std::vector<typename AttentionBlock<S>::Cache> blocks;
    std::vector<Step> steps;
    int rows_before_strip = 0;
    int n_base = 0;
  };

  Backbone() = default;
  Backbone(ParamStore<S>& store, const std::string& group, int depth, int dim, int heads, int mlp_ratio) {
    blocks_.reserve(std::size_t(depth));
    for (int i = 0; i < depth; ++i)
      blocks_.emplace_back(store, detail::cat("blocks.", i), group, dim, heads, mlp_ratio);
  }

  int depth() const { return int(blocks_.size()); }
  const std::vector<AttentionBlock<S>>& blocks() const { return blocks_; }

  /// Runs the first `depth` blocks with fusion hooks. `graph` may be null (no fusion).
  /// Appended tokens are stripped from the returned matrix.
  Mat<S> run(TokenState<S>& state, int depth, const FusionPlan& plan, const std::array<RowVec<S>, 3>* graph,
             Cache* cache = nullptr, FlopCounter* fc = nullptr) const {
    if (depth < 0 || depth > this->depth())
      throw ConfigError(detail::cat("run_backbone: depth ", depth, " exceeds ", this->depth(), " blocks"));
    plan.validate(depth);
    Cache local;
    Cache& c = cache ? *cache : local;
    c.blocks.assign(std::size_t(depth), {});
    c.steps.clear();
    c.n_base = state.n_base();
    state.taps.clear();
    state.appended.clear();
    const auto taps = tap_depths(depth);

    Mat<S> x = state.x;
    auto apply_hooks = [&](int d) {
      if (!graph) return;
      for (const auto& h : plan.hooks) {
        if (h.depth != d) continue;
        const RowVec<S>& g = (*graph)[std::size_t(h.level - 1)];
        if (h.mode == FuseMode::gate) {
          c.steps.push_back({Step::gate, h.level - 1, x, g});
          x = fuse_gate(x, g, fc);
        } else {
          state.appended.push_back(fuse_append(x, g));
          c.steps.push_back({Step::append, h.level - 1, {}, {}});
        }
      }
    };
    apply_hooks(0);
    for (int l = 0; l < depth; ++l) {
      x = blocks_[std::size_t(l)].forward(x, c.blocks[std::size_t(l)], fc);
      c.steps.push_back({Step::block, l, {}, {}});
      if (l + 1 == taps[0] || l + 1 == taps[1] || l + 1 == taps[2]) state.taps.push_back(x);
      apply_hooks(l + 1);
    }
    c.rows_before_strip = int(x.rows());
    return x.topRows(state.n_base());
  }

  /// dout covers the n_base output rows. Returns dL/dX for the input tokens and
  /// accumulates per-level graph-vector gradients into dgraph.
  Mat<S> backward(const Cache& c, const Mat<S>& dout, std::array<RowVec<S>, 3>& dgraph) const {
    Mat<S> dx = Mat<S>::Zero(c.rows_before_strip, dout.cols());
    dx.topRows(dout.rows()) = dout;
    for (auto it = c.steps.rbegin(); it != c.steps.rend(); ++it) {
      switch (it->kind) {
        case Step::block:
          dx = blocks_[std::size_t(it->index)].backward(c.blocks[std::size_t(it->index)], dx);
          break;
        case Step::gate: {
          auto& dg = dgraph[std::size_t(it->index)];
          if (dg.size() == 0) dg = RowVec<S>::Zero(dx.cols());
          Mat<S> dfv;
          fuse_gate_backward(it->input, it->g, dx, dfv, dg);
          dx = std::move(dfv);
          break;
        }
        case Step::append: {
          auto& dg = dgraph[std::size_t(it->index)];
          if (dg.size() == 0) dg = RowVec<S>::Zero(dx.cols());
          dg += dx.row(dx.rows() - 1);
          dx.conservativeResize(dx.rows() - 1, Eigen::NoChange);
          break;
        }
      }
    }
    return dx;
  }

 private:
  std::vector<AttentionBlock<S>> blocks_;
};

}  // namespace sft
