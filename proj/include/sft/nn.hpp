#pragma once

// Differentiable building blocks with hand-written backward passes.
// Every layer is templated on the scalar so gradient checks can run in double
// while training runs in float. Layers hold non-owning pointers into a
// ParamStore; caches produced by forward() are plain values owned by the caller.

#include "sft/common.hpp"
#include "sft/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace sft {

template <typename S>
struct Param {
  std::string name;
  std::string group;
  Mat<S> value;
  Mat<S> grad;

  Eigen::Index size() const { return value.size(); }
  void ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) grad = Mat<S>::Zero(value.rows(), value.cols());
  }
};

template <typename S>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Param<S>& add(const std::string& name, const std::string& group, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw ConfigError(detail::cat("duplicate parameter name '", name, "'"));
    auto p = std::make_unique<Param<S>>();
    p->name = name;
    p->group = group;
    p->value = Mat<S>::Zero(rows, cols);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Param<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Param<S>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  Param<S>& at(const std::string& name) {
    auto* p = find(name);
    if (!p) throw ConfigError(detail::cat("unknown parameter '", name, "'"));
    return *p;
  }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<const Param<S>*> params() const {
    std::vector<const Param<S>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  void set_frozen(const std::string& group, bool frozen) {
    if (frozen) frozen_.insert(group);
    else frozen_.erase(group);
  }
  void freeze_all() {
    for (auto& p : params_) frozen_.insert(p->group);
  }
  bool is_frozen(const std::string& group) const { return frozen_.count(group) > 0; }

  void zero_grad() {
    for (auto& p : params_) {
      p->ensure_grad();
      p->grad.setZero();
    }
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (auto& p : params_) n += std::size_t(p->size());
    return n;
  }
  std::size_t num_parameters_with_prefix(const std::string& prefix) const {
    std::size_t n = 0;
    for (auto& p : params_)
      if (p->name.rfind(prefix, 0) == 0) n += std::size_t(p->size());
    return n;
  }

  /// FNV-1a over names and raw value bytes.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&](const void* data, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
    };
    for (auto& p : params_) {
      feed(p->name.data(), p->name.size());
      feed(p->value.data(), sizeof(S) * std::size_t(p->value.size()));
    }
    return h;
  }

 private:
  std::vector<std::unique_ptr<Param<S>>> params_;
  std::map<std::string, std::size_t> index_;
  std::set<std::string> frozen_;
};

/// Normal(0, std) truncated at two standard deviations.
template <typename S>
void init_trunc_normal(Param<S>& p, double std, KeyedRng& rng) {
  for (Eigen::Index i = 0; i < p.value.size(); ++i) {
    double v;
    do v = rng.normal();
    while (std::abs(v) > 2.0);
    p.value.data()[i] = static_cast<S>(v * std);
  }
}

// ---------------------------------------------------------------------------

template <typename S>
struct Linear {
  Param<S>* weight = nullptr;  // in x out
  Param<S>* bias = nullptr;    // 1 x out

  Linear() = default;
  Linear(ParamStore<S>& store, const std::string& name, const std::string& group, int in, int out) {
    weight = &store.add(name + ".weight", group, in, out);
    bias = &store.add(name + ".bias", group, 1, out);
  }

  int in_features() const { return int(weight->value.rows()); }
  int out_features() const { return int(weight->value.cols()); }

  static std::uint64_t flops(std::uint64_t rows, std::uint64_t in, std::uint64_t out) {
    return 2 * rows * in * out + rows * out;
  }

  Mat<S> forward(const Mat<S>& x, FlopCounter* fc = nullptr) const {
    if (x.cols() != weight->value.rows())
      throw ShapeError(detail::cat(weight->name, ": input has ", x.cols(), " columns, expected ",
                                   weight->value.rows()));
    count(fc, flops(std::uint64_t(x.rows()), std::uint64_t(x.cols()), std::uint64_t(weight->value.cols())));
    Mat<S> y = x * weight->value;
    y.rowwise() += bias->value.row(0);
    return y;
  }

  /// Accumulates parameter gradients; returns dL/dx.
  Mat<S> backward(const Mat<S>& x, const Mat<S>& dy) const {
    weight->ensure_grad();
    bias->ensure_grad();
    weight->grad.noalias() += x.transpose() * dy;
    bias->grad += dy.colwise().sum();
    return dy * weight->value.transpose();
  }
};

template <typename S>
struct LayerNorm {
  Param<S>* gamma = nullptr;
  Param<S>* beta = nullptr;
  double eps = 1e-6;

  struct Cache {
    Mat<S> xhat;
    Eigen::Matrix<S, Eigen::Dynamic, 1> rstd;
  };

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& store, const std::string& name, const std::string& group, int dim) {
    gamma = &store.add(name + ".weight", group, 1, dim);
    beta = &store.add(name + ".bias", group, 1, dim);
    gamma->value.setOnes();
  }

  Mat<S> forward(const Mat<S>& x, Cache& cache) const {
    const Eigen::Index n = x.rows(), d = x.cols();
    cache.xhat.resize(n, d);
    cache.rstd.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const S mean = x.row(i).mean();
      const S var = (x.row(i).array() - mean).square().mean();
      const S r = S(1) / std::sqrt(var + S(eps));
      cache.rstd(i) = r;
      cache.xhat.row(i) = (x.row(i).array() - mean) * r;
    }
    Mat<S> y = cache.xhat.array().rowwise() * gamma->value.row(0).array();
    y.rowwise() += beta->value.row(0);
    return y;
  }

  Mat<S> backward(const Cache& cache, const Mat<S>& dy) const {
    gamma->ensure_grad();
    beta->ensure_grad();
    gamma->grad += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    beta->grad += dy.colwise().sum();
    const Eigen::Index n = dy.rows(), d = dy.cols();
    Mat<S> dx(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto dxhat = (dy.row(i).array() * gamma->value.row(0).array()).eval();
      const S m1 = dxhat.mean();
      const S m2 = (dxhat * cache.xhat.row(i).array()).mean();
      dx.row(i) = cache.rstd(i) * (dxhat - m1 - cache.xhat.row(i).array() * m2);
    }
    return dx;
  }
};

template <typename S>
Mat<S> gelu(const Mat<S>& x) {
  return x.unaryExpr([](S v) { return S(0.5) * v * (S(1) + std::erf(v * S(M_SQRT1_2))); });
}

template <typename S>
Mat<S> gelu_backward(const Mat<S>& x, const Mat<S>& dy) {
  const S inv_sqrt_2pi = S(0.3989422804014327);
  return dy.binaryExpr(x, [=](S g, S v) {
    const S cdf = S(0.5) * (S(1) + std::erf(v * S(M_SQRT1_2)));
    return g * (cdf + v * inv_sqrt_2pi * std::exp(S(-0.5) * v * v));
  });
}

template <typename S>
void softmax_rows_inplace(Mat<S>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const S mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp();
    m.row(i) /= m.row(i).sum();
  }
}

// ---------------------------------------------------------------------------

/// Pre-norm transformer block: x' = x + MHA(LN(x)); out = x' + FFN(LN(x')).
template <typename S>
struct AttentionBlock {
  LayerNorm<S> norm1, norm2;
  Linear<S> qkv, proj, fc1, fc2;
  int heads = 1;

  struct Cache {
    Mat<S> x, h1, qkv, ctx, x1, h2, f1, g;
    typename LayerNorm<S>::Cache ln1, ln2;
    std::vector<Mat<S>> probs;
  };

  AttentionBlock() = default;
  AttentionBlock(ParamStore<S>& store, const std::string& name, const std::string& group, int dim, int num_heads,
                 int mlp_ratio = 4)
      : norm1(store, name + ".norm1", group, dim),
        norm2(store, name + ".norm2", group, dim),
        qkv(store, name + ".attn.qkv", group, dim, 3 * dim),
        proj(store, name + ".attn.proj", group, dim, dim),
        fc1(store, name + ".mlp.fc1", group, dim, mlp_ratio * dim),
        fc2(store, name + ".mlp.fc2", group, mlp_ratio * dim, dim),
        heads(num_heads) {
    if (num_heads < 1 || dim % num_heads != 0)
      throw ConfigError(detail::cat(name, ": embed dim ", dim, " not divisible by ", num_heads, " heads"));
  }

  int dim() const { return qkv.in_features(); }

  static std::uint64_t flops(std::uint64_t n, std::uint64_t c, std::uint64_t hidden) {
    return Linear<S>::flops(n, c, 3 * c) + 4 * n * n * c + Linear<S>::flops(n, c, c) + Linear<S>::flops(n, c, hidden) +
           Linear<S>::flops(n, hidden, c);
  }

  Mat<S> forward(const Mat<S>& x, Cache& cache, FlopCounter* fc = nullptr) const {
    const Eigen::Index n = x.rows(), c = dim();
    if (x.cols() != c) throw ShapeError(detail::cat("attention block: tokens have width ", x.cols(), ", expected ", c));
    const Eigen::Index hd = c / heads;
    const S scale = S(1) / std::sqrt(S(hd));
    cache.x = x;
    cache.h1 = norm1.forward(x, cache.ln1);
    cache.qkv = qkv.forward(cache.h1, fc);
    cache.ctx.resize(n, c);
    cache.probs.resize(std::size_t(heads));
    for (int h = 0; h < heads; ++h) {
      const auto q = cache.qkv.middleCols(h * hd, hd);
      const auto k = cache.qkv.middleCols(c + h * hd, hd);
      const auto v = cache.qkv.middleCols(2 * c + h * hd, hd);
      Mat<S>& p = cache.probs[std::size_t(h)];
      p.noalias() = (q * k.transpose()) * scale;
      softmax_rows_inplace(p);
      cache.ctx.middleCols(h * hd, hd).noalias() = p * v;
    }
    count(fc, 4 * std::uint64_t(n) * std::uint64_t(n) * std::uint64_t(c));
    cache.x1 = x + proj.forward(cache.ctx, fc);
    cache.h2 = norm2.forward(cache.x1, cache.ln2);
    cache.f1 = fc1.forward(cache.h2, fc);
    cache.g = gelu(cache.f1);
    return cache.x1 + fc2.forward(cache.g, fc);
  }

  Mat<S> backward(const Cache& cache, const Mat<S>& dout) const {
    const Eigen::Index n = cache.x.rows(), c = dim(), hd = c / heads;
    const S scale = S(1) / std::sqrt(S(hd));
    Mat<S> dx1 = dout;
    const Mat<S> dg = fc2.backward(cache.g, dout);
    const Mat<S> df1 = gelu_backward(cache.f1, dg);
    dx1 += norm2.backward(cache.ln2, fc1.backward(cache.h2, df1));

    const Mat<S> dctx = proj.backward(cache.ctx, dx1);
    Mat<S> dqkv(n, 3 * c);
    for (int h = 0; h < heads; ++h) {
      const Mat<S>& p = cache.probs[std::size_t(h)];
      const auto q = cache.qkv.middleCols(h * hd, hd);
      const auto k = cache.qkv.middleCols(c + h * hd, hd);
      const auto v = cache.qkv.middleCols(2 * c + h * hd, hd);
      const auto dO = dctx.middleCols(h * hd, hd);
      const Mat<S> dp = dO * v.transpose();
      dqkv.middleCols(2 * c + h * hd, hd).noalias() = p.transpose() * dO;
      const auto rowdot = (dp.array() * p.array()).rowwise().sum().eval();
      const Mat<S> ds = (p.array() * (dp.array().colwise() - rowdot)).matrix() * scale;
      dqkv.middleCols(h * hd, hd).noalias() = ds * k;
      dqkv.middleCols(c + h * hd, hd).noalias() = ds.transpose() * q;
    }
    return dx1 + norm1.backward(cache.ln1, qkv.backward(cache.h1, dqkv));
  }
};

// ---------------------------------------------------------------------------

/// Symmetric normalised adjacency with self loops: D^-1/2 (A + I) D^-1/2, stored row-wise.
struct NormalizedAdjacency {
  std::vector<std::vector<std::pair<int, double>>> rows;
  std::uint64_t nnz = 0;

  NormalizedAdjacency() = default;
  explicit NormalizedAdjacency(const EventGraph& g) {
    const int n = g.num_nodes();
    std::vector<double> deg(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) deg[std::size_t(i)] = double(g.neighbors[std::size_t(i)].size()) + 1.0;
    rows.resize(std::size_t(n));
    for (int i = 0; i < n; ++i) {
      auto& r = rows[std::size_t(i)];
      r.emplace_back(i, 1.0 / deg[std::size_t(i)]);
      for (int j : g.neighbors[std::size_t(i)]) r.emplace_back(j, 1.0 / std::sqrt(deg[std::size_t(i)] * deg[std::size_t(j)]));
      nnz += r.size();
    }
  }

  int size() const { return int(rows.size()); }

  template <typename S>
  Mat<S> apply(const Mat<S>& h) const {
    Mat<S> out = Mat<S>::Zero(h.rows(), h.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (auto [j, w] : rows[i]) out.row(Eigen::Index(i)) += S(w) * h.row(j);
    return out;
  }
};

/// H_out = act(Ahat H W + b).
template <typename S>
struct GcnLayer {
  Linear<S> lin;
  bool activation = true;

  struct Cache {
    Mat<S> h, z;
  };

  GcnLayer() = default;
  GcnLayer(ParamStore<S>& store, const std::string& name, const std::string& group, int in, int out, bool act = true)
      : lin(store, name, group, in, out), activation(act) {}

  static std::uint64_t flops(std::uint64_t n, std::uint64_t nnz, std::uint64_t in, std::uint64_t out) {
    return 2 * n * in * out + 2 * nnz * out + n * out;
  }

  Mat<S> forward(const NormalizedAdjacency& adj, const Mat<S>& h, Cache& cache, FlopCounter* fc = nullptr) const {
    if (h.rows() != adj.size())
      throw ShapeError(detail::cat(lin.weight->name, ": ", h.rows(), " feature rows for ", adj.size(), " nodes"));
    if (h.cols() != lin.in_features())
      throw ShapeError(detail::cat(lin.weight->name, ": feature width ", h.cols(), ", expected ", lin.in_features()));
    count(fc, flops(std::uint64_t(h.rows()), adj.nnz, std::uint64_t(h.cols()), std::uint64_t(lin.out_features())));
    cache.h = h;
    const Mat<S> hw = h * lin.weight->value;
    cache.z = adj.apply(hw);
    cache.z.rowwise() += lin.bias->value.row(0);
    if (!activation) return cache.z;
    return cache.z.cwiseMax(S(0));
  }

  Mat<S> backward(const NormalizedAdjacency& adj, const Cache& cache, const Mat<S>& dy) const {
    Mat<S> dz = dy;
    if (activation) dz = (cache.z.array() > S(0)).select(dy, S(0));
    lin.weight->ensure_grad();
    lin.bias->ensure_grad();
    lin.bias->grad += dz.colwise().sum();
    const Mat<S> dhw = adj.apply(dz);  // symmetric
    lin.weight->grad.noalias() += cache.h.transpose() * dhw;
    return dhw * lin.weight->value.transpose();
  }
};

// ---------------------------------------------------------------------------

/// 3x3 convolution, stride 1, zero padding 1, on a (H*W) x C feature map stored row-major by pixel.
template <typename S>
struct Conv3x3 {
  Param<S>* weight = nullptr;  // (9*in) x out, row index (ky*3 + kx)*in + ci
  Param<S>* bias = nullptr;
  int height = 0, width = 0;

  Conv3x3() = default;
  Conv3x3(ParamStore<S>& store, const std::string& name, const std::string& group, int in, int out, int h, int w)
      : height(h), width(w) {
    weight = &store.add(name + ".weight", group, 9 * in, out);
    bias = &store.add(name + ".bias", group, 1, out);
  }

  int in_channels() const { return int(weight->value.rows() / 9); }
  int out_channels() const { return int(weight->value.cols()); }

  static std::uint64_t flops(std::uint64_t hw, std::uint64_t in, std::uint64_t out) {
    return 2 * hw * 9 * in * out + hw * out;
  }

  Mat<S> im2col(const Mat<S>& x) const {
    const int cin = in_channels();
    Mat<S> col = Mat<S>::Zero(Eigen::Index(height) * width, 9 * cin);
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int rr = r + ky - 1, cc = c + kx - 1;
            if (rr < 0 || cc < 0 || rr >= height || cc >= width) continue;
            col.row(r * width + c).segment((ky * 3 + kx) * cin, cin) = x.row(rr * width + cc);
          }
    return col;
  }

  Mat<S> forward(const Mat<S>& x, Mat<S>& col_cache, FlopCounter* fc = nullptr) const {
    if (x.rows() != Eigen::Index(height) * width || x.cols() != in_channels())
      throw ShapeError(detail::cat(weight->name, ": input ", x.rows(), "x", x.cols(), ", expected ",
                                   height * width, "x", in_channels()));
    count(fc, flops(std::uint64_t(height) * std::uint64_t(width), std::uint64_t(in_channels()),
                    std::uint64_t(out_channels())));
    col_cache = im2col(x);
    Mat<S> y = col_cache * weight->value;
    y.rowwise() += bias->value.row(0);
    return y;
  }

  Mat<S> backward(const Mat<S>& col, const Mat<S>& dy) const {
    weight->ensure_grad();
    bias->ensure_grad();
    weight->grad.noalias() += col.transpose() * dy;
    bias->grad += dy.colwise().sum();
    const Mat<S> dcol = dy * weight->value.transpose();
    const int cin = in_channels();
    Mat<S> dx = Mat<S>::Zero(Eigen::Index(height) * width, cin);
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int rr = r + ky - 1, cc = c + kx - 1;
            if (rr < 0 || cc < 0 || rr >= height || cc >= width) continue;
            dx.row(rr * width + cc) += dcol.row(r * width + c).segment((ky * 3 + kx) * cin, cin);
          }
    return dx;
  }
};

// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::map<std::string, double> group_lr;  // overrides lr per parameter group
};

/// Decoupled weight decay Adam. State is keyed by parameter name.
template <typename S>
class AdamW {
 public:
  struct Moments {
    Mat<S> m, v;
  };

  explicit AdamW(AdamWConfig cfg = {}) : cfg_(std::move(cfg)) {}

  const AdamWConfig& config() const { return cfg_; }
  AdamWConfig& config() { return cfg_; }
  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t s) { step_ = s; }
  std::map<std::string, Moments>& state() { return state_; }
  const std::map<std::string, Moments>& state() const { return state_; }

  double lr_for(const std::string& group) const {
    auto it = cfg_.group_lr.find(group);
    return it == cfg_.group_lr.end() ? cfg_.lr : it->second;
  }

  void step(ParamStore<S>& store) {
    for (auto* p : store.params()) {
      if (store.is_frozen(p->group)) continue;
      p->ensure_grad();
      if (!p->grad.allFinite()) throw NumericError(detail::cat("non-finite gradient in parameter '", p->name, "'"));
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (auto* p : store.params()) {
      if (store.is_frozen(p->group)) continue;
      auto& st = state_[p->name];
      if (st.m.size() != p->value.size()) {
        st.m = Mat<S>::Zero(p->value.rows(), p->value.cols());
        st.v = Mat<S>::Zero(p->value.rows(), p->value.cols());
      }
      const double lr = lr_for(p->group);
      p->value *= S(1.0 - lr * cfg_.weight_decay);
      st.m = S(cfg_.beta1) * st.m + S(1 - cfg_.beta1) * p->grad;
      st.v = S(cfg_.beta2) * st.v + S(1 - cfg_.beta2) * p->grad.cwiseAbs2();
      const S step_size = S(lr / bc1);
      const S denom_scale = S(1.0 / std::sqrt(bc2));
      p->value.array() -= step_size * st.m.array() / (st.v.array().sqrt() * denom_scale + S(cfg_.eps));
    }
  }

 private:
  AdamWConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  std::size_t checked = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0;
  bool pass = true;

  const GradCheckEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
  double max_rel_error() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
};

/// Central-difference check of analytic gradients.
/// `loss_fn(store, with_grad)` returns the scalar loss; when with_grad is true it must
/// leave dL/dparam in each Param::grad (the harness zeroes grads first).
/// Relative error per parameter is max|analytic - numeric| / max(max|analytic|, max|numeric|).
template <typename LossFn>
GradCheckReport grad_check(ParamStore<double>& store, LossFn&& loss_fn, double tolerance, double step = 1e-5) {
  GradCheckReport report;
  report.tolerance = tolerance;
  store.zero_grad();
  loss_fn(store, true);
  std::map<std::string, Mat<double>> analytic;
  for (auto* p : store.params()) {
    p->ensure_grad();
    analytic[p->name] = p->grad;
  }
  for (auto* p : store.params()) {
    GradCheckEntry e;
    e.name = p->name;
    const auto& a = analytic[p->name];
    double max_diff = 0, scale = 0;
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& w = p->value.data()[i];
      const double orig = w;
      w = orig + step;
      const double fp = loss_fn(store, false);
      w = orig - step;
      const double fm = loss_fn(store, false);
      w = orig;
      const double num = (fp - fm) / (2 * step);
      max_diff = std::max(max_diff, std::abs(num - a.data()[i]));
      scale = std::max({scale, std::abs(num), std::abs(a.data()[i])});
      ++e.checked;
    }
    e.max_rel_error = scale > 0 ? max_diff / scale : 0.0;
    e.pass = e.max_rel_error < tolerance;
    report.pass = report.pass && e.pass;
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace sft
