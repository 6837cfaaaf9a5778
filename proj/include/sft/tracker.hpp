#pragma once

// Slow and fast trackers: patch embedding + transformer stack + graph pyramid + centre head.

#include "sft/backbone.hpp"
#include "sft/common.hpp"
#include "sft/event_io.hpp"
#include "sft/fusion.hpp"
#include "sft/graph.hpp"
#include "sft/head.hpp"
#include "sft/nn.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace sft {

enum class TrackerKind { slow, fast };

inline const char* to_string(TrackerKind k) { return k == TrackerKind::slow ? "slow" : "fast"; }

struct ModelConfig {
  int embed_dim = 64;
  int patch_size = 16;
  int template_size = 64;
  int search_size = 128;
  int depth_slow = 12;
  int depth_fast = 6;
  int heads = 4;
  int mlp_ratio = 4;
  int in_channels = kFrameChannels;
  int gcn_dim1 = 16;
  int gcn_dim2 = 64;
  VoxelGrid grid{};
  int knn_k = kDefaultK;
  int max_points = kDefaultMaxPoints;
  std::string plan_slow = kSlowPlan;
  std::string plan_fast = kFastPlan;
  double template_factor = 2.0;
  double search_factor = 4.0;

  static ModelConfig desk() { return {}; }
  static ModelConfig full() {
    ModelConfig c;
    c.embed_dim = 768;
    c.heads = 12;
    c.template_size = 128;
    c.search_size = 256;
    return c;
  }

  int depth(TrackerKind k) const { return k == TrackerKind::slow ? depth_slow : depth_fast; }
  int tokens_template() const { return (template_size / patch_size) * (template_size / patch_size); }
  int tokens_search() const { return (search_size / patch_size) * (search_size / patch_size); }
  int map_size() const { return search_size / patch_size; }

  FusionPlan plan(TrackerKind k) const {
    return FusionPlan::parse(k == TrackerKind::slow ? plan_slow : plan_fast, depth(k));
  }

  void validate() const {
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
      throw ConfigError(detail::cat("embed_dim ", embed_dim, " must be a positive multiple of heads ", heads));
    if (patch_size <= 0 || template_size % patch_size != 0 || search_size % patch_size != 0)
      throw ConfigError("template_size and search_size must be divisible by patch_size");
    if (depth_slow < 0 || depth_fast < 0) throw ConfigError("depths must be non-negative");
    if (knn_k < 1 || max_points < 1) throw ConfigError("knn_k and max_points must be >= 1");
    if (!(template_factor > 0) || !(search_factor > 0)) throw ConfigError("crop factors must be positive");
    plan(TrackerKind::slow);
    plan(TrackerKind::fast);
  }

  /// Architecture-defining keys only; used as the checkpoint compatibility hash.
  std::string canonical() const {
    return detail::cat("embed_dim=", embed_dim, ";patch_size=", patch_size, ";template_size=", template_size,
                       ";search_size=", search_size, ";depth_slow=", depth_slow, ";depth_fast=", depth_fast,
                       ";heads=", heads, ";mlp_ratio=", mlp_ratio, ";in_channels=", in_channels,
                       ";gcn_dim1=", gcn_dim1, ";gcn_dim2=", gcn_dim2, ";plan_slow=", plan_slow,
                       ";plan_fast=", plan_fast);
  }
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char ch : canonical()) h = (h ^ static_cast<unsigned char>(ch)) * 0x100000001b3ULL;
    return h;
  }
};

inline std::uint64_t name_key(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char ch : s) h = (h ^ static_cast<unsigned char>(ch)) * 0x100000001b3ULL;
  return h;
}

template <typename S>
class Tracker {
 public:
  struct Cache {
    Mat<S> patches_z, patches_s;
    TokenState<S> state;
    typename Backbone<S>::Cache backbone;
    typename LayerNorm<S>::Cache norm;
    std::optional<typename GraphPyramidNet<S>::Cache> pyramid;
    typename CenterHead<S>::Cache head;
    Mat<S> features;
  };
  struct Output {
    HeadMaps<S> maps;
    Mat<S> features;  // search tokens entering the head (N_s x C)
  };

  Tracker(const ModelConfig& cfg, TrackerKind kind, std::uint64_t seed = 0)
      : cfg_(cfg), kind_(kind), depth_(cfg.depth(kind)), plan_(cfg.plan(kind)) {
    cfg.validate();
    const int c = cfg.embed_dim, p = cfg.patch_size;
    embed_ = Linear<S>(store_, "patch_embed.proj", "vit", cfg.in_channels * p * p, c);
    pos_template_ = &store_.add("pos_embed.template", "vit", cfg.tokens_template(), c);
    pos_search_ = &store_.add("pos_embed.search", "vit", cfg.tokens_search(), c);
    backbone_ = Backbone<S>(store_, "vit", depth_, c, cfg.heads, cfg.mlp_ratio);
    norm_ = LayerNorm<S>(store_, "norm", "vit", c);
    if (!plan_.empty()) {
      PyramidConfig pc;
      pc.dim1 = cfg.gcn_dim1;
      pc.dim2 = cfg.gcn_dim2;
      pc.out_dim = c;
      pc.grid = cfg.grid;
      for (int l = 0; l < 3; ++l) pc.levels[std::size_t(l)] = plan_.uses_level(l + 1);
      pyramid_ = GraphPyramidNet<S>(store_, "gcn", "gcn", pc);
    }
    head_ = CenterHead<S>(store_, "head", "head", c, cfg.map_size());
    initialize(seed);
  }

  Tracker(const Tracker&) = delete;
  Tracker& operator=(const Tracker&) = delete;
  Tracker(Tracker&&) noexcept = default;
  Tracker& operator=(Tracker&&) noexcept = default;

  /// Truncated normal(0.02) for weight matrices and positional tables, zero biases, unit LayerNorm gains.
  /// Each tensor draws from its own stream keyed by (seed, name).
  void initialize(std::uint64_t seed) {
    for (auto* prm : store_.params()) {
      const auto& n = prm->name;
      const bool is_bias = n.size() >= 5 && n.compare(n.size() - 5, 5, ".bias") == 0;
      const bool is_norm = n.find("norm") != std::string::npos;
      if (is_norm) {
        prm->value.setConstant(is_bias ? S(0) : S(1));
      } else if (is_bias) {
        prm->value.setZero();
      } else {
        KeyedRng rng(hash_key(seed, name_key(n)));
        init_trunc_normal(*prm, 0.02, rng);
      }
    }
  }

  const ModelConfig& config() const { return cfg_; }
  TrackerKind kind() const { return kind_; }
  int depth() const { return depth_; }
  const FusionPlan& plan() const { return plan_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }
  const Backbone<S>& backbone() const { return backbone_; }

  /// Patch embedding plus positional tables, concatenated as [template | search].
  TokenState<S> embed_tokens(const Image& tmpl, const Image& search, Cache* cache = nullptr,
                             FlopCounter* fc = nullptr) const {
    if (tmpl.height != cfg_.template_size || tmpl.width != cfg_.template_size)
      throw ShapeError(detail::cat("template crop ", tmpl.height, "x", tmpl.width, ", expected ", cfg_.template_size));
    if (search.height != cfg_.search_size || search.width != cfg_.search_size)
      throw ShapeError(detail::cat("search crop ", search.height, "x", search.width, ", expected ", cfg_.search_size));
    Mat<S> pz = extract_patches<S>(tmpl, cfg_.patch_size);
    Mat<S> ps = extract_patches<S>(search, cfg_.patch_size);
    TokenState<S> st;
    st.n_template = int(pz.rows());
    st.n_search = int(ps.rows());
    st.x.resize(pz.rows() + ps.rows(), cfg_.embed_dim);
    st.x.topRows(pz.rows()) = embed_.forward(pz, fc) + pos_template_->value;
    st.x.bottomRows(ps.rows()) = embed_.forward(ps, fc) + pos_search_->value;
    if (cache) {
      cache->patches_z = std::move(pz);
      cache->patches_s = std::move(ps);
    }
    return st;
  }

  /// Full forward. `graph` may be null, in which case no fusion hook fires.
  Output forward(const Image& tmpl, const Image& search, const EventGraph* graph, Cache* cache = nullptr,
                 FlopCounter* fc = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    c.state = embed_tokens(tmpl, search, &c, fc);
    std::array<RowVec<S>, 3> vectors;
    const std::array<RowVec<S>, 3>* vptr = nullptr;
    c.pyramid.reset();
    if (graph && !plan_.empty()) {
      c.pyramid.emplace();
      vectors = pyramid_.forward(*graph, *c.pyramid, fc).level;
      vptr = &vectors;
    }
    const Mat<S> y = backbone_.run(c.state, depth_, plan_, vptr, &c.backbone, fc);
    return finish(y, c, fc);
  }

  /// dmaps: dL/d(head maps); dfeatures: optional dL/d(head input features).
  void backward(const Cache& c, const HeadMaps<S>& dmaps, const Mat<S>* dfeatures = nullptr) const {
    Mat<S> dfeat = head_.backward(c.head, dmaps);
    if (dfeatures) dfeat += *dfeatures;
    Mat<S> dnorm_out = Mat<S>::Zero(c.state.n_base(), cfg_.embed_dim);
    dnorm_out.bottomRows(c.state.n_search) = dfeat;
    const Mat<S> dy = norm_.backward(c.norm, dnorm_out);
    std::array<RowVec<S>, 3> dvec;
    const Mat<S> dx = backbone_.backward(c.backbone, dy, dvec);
    if (c.pyramid) pyramid_.backward(*c.pyramid, dvec);
    const auto nz = c.state.n_template;
    pos_template_->ensure_grad();
    pos_search_->ensure_grad();
    pos_template_->grad += dx.topRows(nz);
    pos_search_->grad += dx.bottomRows(c.state.n_search);
    embed_.backward(c.patches_z, dx.topRows(nz));
    embed_.backward(c.patches_s, dx.bottomRows(c.state.n_search));
  }

  // -- split path used by event-graph accumulation (fast plan: single gate after the last block) --

  bool supports_accumulation() const {
    return plan_.hooks.size() == 1 && plan_.hooks[0].mode == FuseMode::gate && plan_.hooks[0].depth == depth_;
  }

  /// Backbone output before the final gate; reusable across sub-window graphs.
  Mat<S> visual_tokens(const Image& tmpl, const Image& search, FlopCounter* fc = nullptr) const {
    if (!supports_accumulation())
      throw ConfigError("accumulation needs a fusion plan with a single gate after the last block");
    TokenState<S> st = embed_tokens(tmpl, search, nullptr, fc);
    return backbone_.run(st, depth_, FusionPlan{}, nullptr, nullptr, fc);
  }

  RowVec<S> graph_vector(const EventGraph& graph, FlopCounter* fc = nullptr) const {
    if (plan_.empty()) throw ConfigError("tracker has no graph branch");
    typename GraphPyramidNet<S>::Cache pc;
    const int level = plan_.hooks.back().level;
    return pyramid_.forward(graph, pc, fc).level[std::size_t(level - 1)];
  }

  /// Gate cached tokens with g (null = no gate) and run norm + head.
  Output head_from_visual(const Mat<S>& cached, const RowVec<S>* g, FlopCounter* fc = nullptr) const {
    Cache c;
    c.state.n_template = cfg_.tokens_template();
    c.state.n_search = cfg_.tokens_search();
    if (!g) return finish(cached, c, fc);
    return finish(fuse_gate(cached, *g, fc), c, fc);
  }

  /// Parameter counts by top-level module prefix.
  std::vector<std::pair<std::string, std::size_t>> parameter_breakdown() const {
    std::vector<std::pair<std::string, std::size_t>> out;
    for (const char* prefix : {"patch_embed", "pos_embed", "blocks", "norm", "gcn", "head"})
      out.emplace_back(prefix, store_.num_parameters_with_prefix(prefix));
    return out;
  }

 private:
  Output finish(const Mat<S>& y, Cache& c, FlopCounter* fc) const {
    const Mat<S> normed = norm_.forward(y, c.norm);
    c.features = normed.bottomRows(c.state.n_search);
    Output out;
    out.maps = head_.forward(c.features, c.head, fc);
    out.features = c.features;
    return out;
  }

  ModelConfig cfg_;
  TrackerKind kind_;
  int depth_;
  FusionPlan plan_;
  ParamStore<S> store_;
  Linear<S> embed_;
  Param<S>* pos_template_ = nullptr;
  Param<S>* pos_search_ = nullptr;
  Backbone<S> backbone_;
  LayerNorm<S> norm_;
  GraphPyramidNet<S> pyramid_;
  CenterHead<S> head_;
};

/// Copies every tensor whose name and shape match. Returns the number copied.
template <typename S>
std::size_t copy_matching_params(const ParamStore<S>& src, ParamStore<S>& dst) {
  std::size_t n = 0;
  for (auto* p : dst.params()) {
    const auto* q = src.find(p->name);
    if (q && q->value.rows() == p->value.rows() && q->value.cols() == p->value.cols()) {
      p->value = q->value;
      ++n;
    }
  }
  return n;
}

}  // namespace sft
