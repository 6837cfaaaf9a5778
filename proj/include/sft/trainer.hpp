#pragma once

// Stage-1 training of either tracker and stage-2 distillation of the fast tracker.

#include "sft/common.hpp"
#include "sft/config.hpp"
#include "sft/head.hpp"
#include "sft/losses.hpp"
#include "sft/nn.hpp"
#include "sft/pipeline.hpp"
#include "sft/tracker.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <vector>

namespace sft {

/// Which windows and crop centre one training sample uses.
struct SamplePlan {
  int sequence = 0;
  int template_window = 0;
  int search_window = 0;
  Box centre;  // jittered box the search crop is centred on (sensor pixels)
};

enum : std::uint64_t { kTrainStream = 0x7261696eULL, kProbeStream = 0x70726f62ULL };

inline SamplePlan draw_sample(const std::vector<PreparedSequence>& data, const TrainConfig& tc, std::uint64_t seed,
                              std::uint64_t stream, int epoch, int index) {
  if (data.empty()) throw ArgumentError("training set is empty");
  KeyedRng rng(hash_key(seed, stream, std::uint64_t(epoch), std::uint64_t(index)));
  SamplePlan p;
  p.sequence = int(rng.below(data.size()));
  const int nw = data[std::size_t(p.sequence)].num_windows();
  if (nw < 2) throw ValidationError(detail::cat("sequence ", p.sequence, " has fewer than 2 windows"));
  p.template_window = int(rng.below(std::uint64_t(nw - 1)));
  const int span = std::min(tc.max_delta, nw - 1 - p.template_window);
  p.search_window = p.template_window + 1 + int(rng.below(std::uint64_t(span)));
  const Box gt = data[std::size_t(p.sequence)].record.ground_truth[std::size_t(p.search_window)];
  const double base = std::sqrt(gt.w * gt.h);
  const double dx = tc.center_jitter * base * rng.uniform(-1, 1);
  const double dy = tc.center_jitter * base * rng.uniform(-1, 1);
  const double s = std::exp(rng.uniform(-tc.scale_jitter, tc.scale_jitter));
  p.centre = Box::from_center(gt.cx() + dx, gt.cy() + dy, gt.w * s, gt.h * s);
  return p;
}

/// Frame the tracker sees for search window s: the slow tracker uses frame s, the fast tracker
/// the previous complete frame (s-1) together with the graph of window s.
inline int search_frame(TrackerKind kind, int search_window) {
  return kind == TrackerKind::slow ? search_window : std::max(0, search_window - 1);
}

inline TrackerInput build_input(const PreparedSequence& seq, const SamplePlan& p, int frame, const ModelConfig& cfg) {
  TrackerInput in;
  in.tmpl = template_crop(seq, p.template_window, seq.record.ground_truth[std::size_t(p.template_window)], cfg).image;
  Crop sc = search_crop(seq, frame, p.centre, cfg);
  in.search = std::move(sc.image);
  in.search_tf = sc.transform;
  in.graph = window_graph(window_events(seq.record, p.search_window), cfg);
  return in;
}

/// Crop-normalised target of a sample.
inline Box sample_target(const PreparedSequence& seq, const SamplePlan& p, const TrackerInput& in) {
  return in.search_tf.sensor_to_normalized(seq.record.ground_truth[std::size_t(p.search_window)]);
}

/// Weighted loss of one sample. With `grad_scale` > 0 gradients are accumulated into the tracker's store.
/// Regression terms use the box read at the target's centre cell.
template <typename S>
LossBundle sample_loss(const Tracker<S>& model, const TrackerInput& in, const Box& target, const LossWeights& w,
                       const Mat<S>* teacher_features = nullptr, double grad_scale = 0) {
  typename Tracker<S>::Cache cache;
  const auto out = model.forward(in.tmpl, in.search, in.graph ? &*in.graph : nullptr, &cache);
  const TargetMaps enc = encode_target(target, out.maps.height, out.maps.width);
  const bool grad = grad_scale > 0;
  Mat<S> dscore, dfeat;
  const double focal = focal_loss(out.maps.score, enc.heatmap, grad ? &dscore : nullptr);
  const Box pred = box_at_cell(out.maps, enc.row, enc.col);
  std::array<double, 4> dl1{}, dgiou{};
  const double l1 = l1_loss(pred, target, grad ? &dl1 : nullptr);
  const double giou = giou_loss(pred, target, grad ? &dgiou : nullptr);
  double kd = 0;
  if (teacher_features) {
    if (teacher_features->cols() != out.features.cols())
      throw ConfigError(detail::cat("teacher feature width ", teacher_features->cols(), " differs from student width ",
                                    out.features.cols()));
    kd = kd_loss(out.features, *teacher_features, grad ? &dfeat : nullptr);
  }
  const LossBundle b = total_loss(focal, l1, giou, kd, w);
  if (grad) {
    auto dmaps = HeadMaps<S>::zeros_like(out.maps);
    dmaps.score = dscore * S(w.focal * grad_scale);
    std::array<double, 4> dc;
    for (std::size_t i = 0; i < 4; ++i) dc[i] = (w.l1 * dl1[i] + w.giou * dgiou[i]) * grad_scale;
    box_corner_grad_to_maps(dc, enc.row, enc.col, dmaps);
    if (teacher_features) {
      dfeat *= S(w.kd * grad_scale);
      model.backward(cache, dmaps, &dfeat);
    } else {
      model.backward(cache, dmaps);
    }
  }
  return b;
}

struct EpochStats {
  int epoch = 0;
  double focal = 0, l1 = 0, giou = 0, kd = 0, total = 0;
  double probe_kd = std::nan("");
  double seconds = 0;
};

inline void write_loss_header(std::ostream& os) { os << "epoch,focal,l1,giou,kd,total,probe_kd,seconds\n"; }
inline void write_loss_row(std::ostream& os, const EpochStats& s) {
  os << s.epoch << ',' << s.focal << ',' << s.l1 << ',' << s.giou << ',' << s.kd << ',' << s.total << ','
     << s.probe_kd << ',' << s.seconds << '\n';
}

/// Return false to stop after this epoch.
using EpochCallback = std::function<bool(const EpochStats&)>;

inline AdamWConfig stage_optimizer(const TrainConfig& tc, bool finetune) {
  AdamWConfig a;
  a.lr = finetune ? tc.finetune_lr_backbone : tc.lr_backbone;
  a.weight_decay = tc.weight_decay;
  a.group_lr["vit"] = a.lr;
  a.group_lr["head"] = a.lr;
  a.group_lr["gcn"] = finetune ? tc.finetune_lr_gcn : tc.lr_gcn;
  return a;
}

namespace train_detail {

inline NumericError batch_error(const NumericError& e, int epoch, int batch, int index, const SamplePlan& p) {
  return NumericError(detail::cat("training aborted at epoch ", epoch, " batch ", batch, " sample ", index,
                                  " (sequence ", p.sequence, ", template window ", p.template_window,
                                  ", search window ", p.search_window, "): ", e.what()));
}

template <typename S>
void check_frozen_untouched(const ParamStore<S>& store) {
  for (const auto* p : store.params())
    if (p->grad.size() && !p->grad.isZero(0))
      throw Error(detail::cat("frozen parameter '", p->name, "' received a gradient"));
}

template <typename S, typename Teacher>
std::vector<EpochStats> run_epochs(Tracker<S>& model, AdamW<S>& opt, const std::vector<PreparedSequence>& data,
                                   const RunConfig& cfg, int epochs, int start_epoch, Teacher* teacher,
                                   const std::function<double()>& probe, const EpochCallback& on_epoch) {
  const TrainConfig& tc = cfg.train;
  if (tc.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const int per_epoch = int(data.size()) * tc.samples_per_sequence;
  const int batches = (per_epoch + tc.batch_size - 1) / tc.batch_size;
  std::vector<EpochStats> history;
  for (int epoch = start_epoch; epoch < epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochStats st;
    st.epoch = epoch;
    for (int b = 0; b < batches; ++b) {
      const int first = b * tc.batch_size;
      const int count = std::min(tc.batch_size, per_epoch - first);
      model.params().zero_grad();
      for (int i = first; i < first + count; ++i) {
        const SamplePlan p = draw_sample(data, tc, cfg.seed, kTrainStream, epoch, i);
        const auto& seq = data[std::size_t(p.sequence)];
        try {
          const TrackerInput in = build_input(seq, p, search_frame(model.kind(), p.search_window), cfg.model);
          const Box target = sample_target(seq, p, in);
          LossBundle lb;
          if constexpr (std::is_same_v<Teacher, Tracker<S>>) {
            const TrackerInput tin = build_input(seq, p, search_frame(teacher->kind(), p.search_window), cfg.model);
            const auto tout = teacher->forward(tin.tmpl, tin.search, tin.graph ? &*tin.graph : nullptr);
            lb = sample_loss(model, in, target, tc.lambda, &tout.features, 1.0 / count);
          } else {
            LossWeights w = tc.lambda;
            w.kd = 0;
            lb = sample_loss<S>(model, in, target, w, nullptr, 1.0 / count);
          }
          st.focal += lb.focal;
          st.l1 += lb.l1;
          st.giou += lb.giou;
          st.kd += lb.kd;
          st.total += lb.total;
        } catch (const NumericError& e) {
          throw batch_error(e, epoch, b, i, p);
        }
      }
      try {
        opt.step(model.params());
      } catch (const NumericError& e) {
        throw NumericError(detail::cat("training aborted at epoch ", epoch, " batch ", b, ": ", e.what()));
      }
      if constexpr (std::is_same_v<Teacher, Tracker<S>>) check_frozen_untouched(teacher->params());
    }
    for (double* v : {&st.focal, &st.l1, &st.giou, &st.kd, &st.total}) *v /= per_epoch;
    if (probe) st.probe_kd = probe();
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(st);
    if (on_epoch && !on_epoch(st)) break;
  }
  return history;
}

}  // namespace train_detail

/// Independent training of one tracker with the KD weight forced to zero.
template <typename S>
std::vector<EpochStats> train_stage1(Tracker<S>& model, AdamW<S>& opt, const std::vector<PreparedSequence>& data,
                                     const RunConfig& cfg, int start_epoch = 0, const EpochCallback& on_epoch = {}) {
  return train_detail::run_epochs<S, void>(model, opt, data, cfg, cfg.train.epochs, start_epoch, nullptr, {},
                                           on_epoch);
}

/// Fixed probe batch for measuring feature agreement between teacher and student.
struct ProbeBatch {
  std::vector<TrackerInput> student, teacher;
};

inline ProbeBatch make_probe_batch(const std::vector<PreparedSequence>& data, const RunConfig& cfg,
                                   TrackerKind student_kind, TrackerKind teacher_kind) {
  ProbeBatch pb;
  for (int i = 0; i < cfg.train.probe_size; ++i) {
    const SamplePlan p = draw_sample(data, cfg.train, cfg.seed, kProbeStream, 0, i);
    const auto& seq = data[std::size_t(p.sequence)];
    pb.student.push_back(build_input(seq, p, search_frame(student_kind, p.search_window), cfg.model));
    pb.teacher.push_back(build_input(seq, p, search_frame(teacher_kind, p.search_window), cfg.model));
  }
  return pb;
}

/// Mean feature MSE between student and teacher over the probe batch.
template <typename S>
double probe_kd(const Tracker<S>& teacher, const Tracker<S>& student, const ProbeBatch& pb) {
  double sum = 0;
  for (std::size_t i = 0; i < pb.student.size(); ++i) {
    const auto& s = pb.student[i];
    const auto& t = pb.teacher[i];
    const auto fs = student.forward(s.tmpl, s.search, s.graph ? &*s.graph : nullptr).features;
    const auto ft = teacher.forward(t.tmpl, t.search, t.graph ? &*t.graph : nullptr).features;
    sum += kd_loss(fs, ft);
  }
  return pb.student.empty() ? 0 : sum / double(pb.student.size());
}

/// Fine-tunes the student with the full loss against a frozen teacher. The teacher's store is frozen
/// and checked for stray gradients after every optimizer step.
template <typename S>
std::vector<EpochStats> train_stage2(Tracker<S>& teacher, Tracker<S>& student, AdamW<S>& opt,
                                     const std::vector<PreparedSequence>& data, const RunConfig& cfg,
                                     int start_epoch = 0, const EpochCallback& on_epoch = {}) {
  if (teacher.config().embed_dim != student.config().embed_dim)
    throw ConfigError("teacher and student feature widths differ");
  teacher.params().freeze_all();
  teacher.params().zero_grad();
  const ProbeBatch pb = make_probe_batch(data, cfg, student.kind(), teacher.kind());
  const std::function<double()> probe = [&] { return probe_kd(teacher, student, pb); };
  return train_detail::run_epochs<S, Tracker<S>>(student, opt, data, cfg, cfg.train.finetune_epochs, start_epoch,
                                                 &teacher, probe, on_epoch);
}

}  // namespace sft
