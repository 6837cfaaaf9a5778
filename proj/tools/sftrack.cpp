#include "sft/sft.hpp"
#include "sft/verify.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace sft;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

struct UsageError : Error {
  using Error::Error;
};

struct Common {
  std::string config;
  std::string out;
  bool overwrite = false;
};

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> kv;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) throw UsageError("unexpected argument '" + a + "'");
    std::string key = a.substr(2), value;
    if (auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw UsageError("missing value for --" + key);
      value = extras[++i];
    }
    kv.emplace_back(key, value);
  }
  return kv;
}

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& extras,
                         const std::optional<RunConfig>& base = std::nullopt) {
  RunConfig cfg = path.empty() ? base.value_or(RunConfig{}) : load_config(path);
  apply_overrides(cfg, parse_overrides(extras));
  cfg.model.validate();
  return cfg;
}

RunConfig config_from_meta(const nlohmann::json& meta) {
  RunConfig cfg;
  std::vector<std::pair<std::string, std::string>> kv;
  for (const auto& [k, v] : meta.at("config").items()) kv.emplace_back(k, v.get<std::string>());
  apply_overrides(cfg, kv);
  return cfg;
}

void claim_output(const fs::path& p, bool overwrite, bool is_dir) {
  if (p.empty()) throw UsageError("--out is required");
  if (fs::exists(p)) {
    const bool occupied = fs::is_directory(p) ? !fs::is_empty(p) : true;
    if (occupied && !overwrite)
      throw UsageError("refusing to overwrite existing " + p.string() + " (pass --overwrite)");
    if (occupied) fs::remove_all(p);
  }
  if (is_dir) fs::create_directories(p);
  else if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void save_config(const fs::path& dir, const RunConfig& cfg) {
  std::ofstream out(dir / "config.cfg");
  out << config_to_text(cfg);
}

nlohmann::json meta_for(const RunConfig& cfg, TrackerKind kind, const std::string& stage, int epoch) {
  nlohmann::json m;
  m["kind"] = to_string(kind);
  m["stage"] = stage;
  m["epoch"] = epoch;
  m["config"] = config_to_map(cfg);
  return m;
}

TrackerKind parse_kind(const std::string& s) {
  if (s == "slow") return TrackerKind::slow;
  if (s == "fast") return TrackerKind::fast;
  throw UsageError("--mode must be slow|fast, got '" + s + "'");
}

struct LoadedModel {
  RunConfig cfg;
  Tracker<float> model;
};

LoadedModel load_model(const std::string& ckpt, const std::string& config, const std::vector<std::string>& extras,
                       const std::string& mode) {
  const CheckpointData ck = read_checkpoint(ckpt);
  RunConfig cfg = resolve_config(config, extras, config_from_meta(ck.meta));
  const TrackerKind kind = parse_kind(ck.meta.at("kind").get<std::string>());
  if (!mode.empty() && parse_kind(mode) != kind)
    throw UsageError("--mode " + mode + " does not match the " + to_string(kind) + " checkpoint");
  Tracker<float> model(cfg.model, kind, cfg.seed);
  load_params(ck, model.params(), cfg.model.hash());
  return {cfg, std::move(model)};
}

void print_epoch(const EpochStats& s) {
  std::cout << "epoch " << s.epoch << "  total " << s.total << "  focal " << s.focal << "  l1 " << s.l1 << "  giou "
            << s.giou << "  kd " << s.kd;
  if (!std::isnan(s.probe_kd)) std::cout << "  probe_kd " << s.probe_kd;
  std::cout << "  (" << std::fixed << std::setprecision(1) << s.seconds << "s)" << std::defaultfloat
            << std::setprecision(6) << std::endl;
}

int cmd_gen_data(const Common& c, const std::vector<std::string>& extras) {
  const RunConfig cfg = resolve_config(c.config, extras);
  claim_output(c.out, c.overwrite, true);
  const auto seqs = generate_dataset(cfg.data, cfg.seed);
  save_dataset(c.out, seqs);
  save_config(c.out, cfg);
  std::cout << "wrote " << seqs.size() << " sequences to " << c.out << "\n";
  return kOk;
}

int cmd_train(const Common& c, const std::vector<std::string>& extras, const std::string& mode,
              const std::string& data_dir, const std::string& init, bool resume) {
  const RunConfig cfg = resolve_config(c.config, extras);
  const TrackerKind kind = parse_kind(mode);
  const fs::path out = c.out;
  const fs::path ckpt_path = out / "checkpoint.bin";
  const bool resuming = resume && fs::exists(ckpt_path);
  if (!resuming) claim_output(out, c.overwrite, true);
  const auto data = load_dataset(data_dir);
  Tracker<float> model(cfg.model, kind, cfg.seed);
  AdamW<float> opt(stage_optimizer(cfg.train, false));
  int start = 0;
  if (resuming) {
    const CheckpointData ck = read_checkpoint(ckpt_path);
    if (ck.meta.value("stage", "") != mode) throw UsageError("checkpoint in " + out.string() + " is not a " + mode + " run");
    load_params(ck, model.params(), cfg.model.hash());
    load_optimizer(ck, model.params(), opt);
    start = ck.meta.at("epoch").get<int>() + 1;
    std::cout << "resuming at epoch " << start << "\n";
  } else if (!init.empty()) {
    const CheckpointData ck = read_checkpoint(init);
    Tracker<float> src(config_from_meta(ck.meta).model, parse_kind(ck.meta.at("kind").get<std::string>()), 0);
    load_params(ck, src.params(), 0);
    std::cout << "initialised " << copy_matching_params(src.params(), model.params()) << " tensors from " << init << "\n";
  }
  save_config(out, cfg);
  std::ofstream loss(out / "loss.csv", resuming ? std::ios::app : std::ios::trunc);
  if (!resuming) write_loss_header(loss);
  train_stage1(model, opt, data, cfg, start, [&](const EpochStats& s) {
    print_epoch(s);
    write_loss_row(loss, s);
    loss.flush();
    save_checkpoint(ckpt_path, model.params(), cfg.model.hash(), meta_for(cfg, kind, mode, s.epoch), &opt);
    return true;
  });
  std::cout << "checkpoint: " << ckpt_path.string() << "\n";
  return kOk;
}

int cmd_finetune(const Common& c, const std::vector<std::string>& extras, const std::string& data_dir,
                 const std::string& slow_ckpt, const std::string& fast_ckpt, bool resume) {
  if (slow_ckpt.empty()) throw UsageError("finetune requires --slow <checkpoint>");
  if (fast_ckpt.empty()) throw UsageError("finetune requires --fast <checkpoint>");
  const RunConfig cfg = resolve_config(c.config, extras);
  const fs::path out = c.out;
  const fs::path ckpt_path = out / "checkpoint.bin";
  const bool resuming = resume && fs::exists(ckpt_path);
  if (!resuming) claim_output(out, c.overwrite, true);
  const auto data = load_dataset(data_dir);
  Tracker<float> teacher(cfg.model, TrackerKind::slow, cfg.seed);
  Tracker<float> student(cfg.model, TrackerKind::fast, cfg.seed);
  load_params(read_checkpoint(slow_ckpt), teacher.params(), cfg.model.hash());
  AdamW<float> opt(stage_optimizer(cfg.train, true));
  int start = 0;
  if (resuming) {
    const CheckpointData ck = read_checkpoint(ckpt_path);
    load_params(ck, student.params(), cfg.model.hash());
    load_optimizer(ck, student.params(), opt);
    start = ck.meta.at("epoch").get<int>() + 1;
  } else {
    load_params(read_checkpoint(fast_ckpt), student.params(), cfg.model.hash());
  }
  const std::uint64_t teacher_hash = teacher.params().hash();
  save_config(out, cfg);
  std::ofstream loss(out / "loss.csv", resuming ? std::ios::app : std::ios::trunc);
  if (!resuming) write_loss_header(loss);
  if (!resuming) {
    const ProbeBatch pb = make_probe_batch(data, cfg, TrackerKind::fast, TrackerKind::slow);
    std::cout << "probe_kd before fine-tuning " << probe_kd(teacher, student, pb) << "\n";
  }
  train_stage2(teacher, student, opt, data, cfg, start, [&](const EpochStats& s) {
    print_epoch(s);
    write_loss_row(loss, s);
    loss.flush();
    auto meta = meta_for(cfg, TrackerKind::fast, "finetune", s.epoch);
    meta["teacher_hash"] = teacher_hash;
    save_checkpoint(ckpt_path, student.params(), cfg.model.hash(), meta, &opt);
    return true;
  });
  if (teacher.params().hash() != teacher_hash) throw Error("teacher parameters changed during fine-tuning");
  std::cout << "checkpoint: " << ckpt_path.string() << "\n";
  return kOk;
}

int cmd_track(const Common& c, const std::vector<std::string>& extras, const std::string& ckpt,
              const std::string& sequence, const std::string& mode) {
  if (ckpt.empty() || sequence.empty()) throw UsageError("track requires --ckpt and --sequence");
  auto [cfg, model] = load_model(ckpt, c.config, extras, mode);
  claim_output(c.out, c.overwrite, false);
  const PreparedSequence seq(load_sequence(sequence));
  const TrackRun run = track_sequence(model, seq, cfg.k);
  std::ofstream out(c.out);
  write_results(out, run);
  const Metrics m = compute_metrics(run, seq.record);
  std::cout << run.boxes.size() << " outputs  SR " << m.sr << "  PR " << m.pr << "  NPR " << m.npr << "\n";
  return kOk;
}

int cmd_eval(const Common& c, const std::vector<std::string>& extras, const std::string& ckpt,
             const std::string& data_dir, const std::string& mode) {
  if (ckpt.empty() || data_dir.empty()) throw UsageError("eval requires --ckpt and --data");
  auto [cfg, model] = load_model(ckpt, c.config, extras, mode);
  const fs::path out = c.out;
  claim_output(out, c.overwrite, true);
  fs::create_directories(out / "results");
  std::vector<SequenceScore> scores;
  std::vector<Box> all_pred, all_gt;
  for (const auto& dir : dataset_sequence_dirs(data_dir)) {
    const PreparedSequence seq(load_sequence(dir));
    const TrackRun run = track_sequence(model, seq, cfg.k);
    std::ofstream rf(out / "results" / (dir.filename().string() + ".txt"));
    write_results(rf, run);
    SequenceScore s;
    s.name = dir.filename().string();
    s.attributes = seq.record.attributes;
    s.metrics = compute_metrics(run, seq.record);
    double lat = 0;
    for (std::size_t i = std::size_t(run.k); i < run.latency_us.size(); ++i) lat += run.latency_us[i];
    s.fps = lat > 0 ? 1e6 * double(run.latency_us.size() - std::size_t(run.k)) / lat : 0;
    const auto wb = run.window_boxes();
    all_pred.insert(all_pred.end(), wb.begin(), wb.end());
    all_gt.insert(all_gt.end(), seq.record.ground_truth.begin(), seq.record.ground_truth.end());
    scores.push_back(std::move(s));
  }
  auto summary = summary_json(scores);
  summary["mode"] = to_string(model.kind());
  summary["k"] = model.kind() == TrackerKind::fast ? cfg.k : 1;
  std::ofstream(out / "summary.json") << summary.dump(2) << "\n";
  std::ofstream curves(out / "curves.csv");
  write_curves(curves, compute_metrics(all_pred, all_gt));
  save_config(out, cfg);
  std::cout << summary["overall"].dump() << "\n";
  return kOk;
}

int cmd_bench(const Common& c, const std::vector<std::string>& extras, const std::string& ckpt,
              const std::string& sequence, const std::string& mode) {
  std::optional<LoadedModel> lm;
  if (!ckpt.empty()) {
    lm.emplace(load_model(ckpt, c.config, extras, mode));
  } else {
    RunConfig cfg = resolve_config(c.config, extras);
    lm.emplace(LoadedModel{cfg, Tracker<float>(cfg.model, parse_kind(mode.empty() ? "slow" : mode), cfg.seed)});
  }
  const RunConfig& cfg = lm->cfg;
  const PreparedSequence seq = sequence.empty()
                                   ? PreparedSequence(generate_sequence(random_synth_config(cfg.data, 0, cfg.seed)))
                                   : PreparedSequence(load_sequence(sequence));
  const LatencyReport r = bench_latency(lm->model, seq, cfg.k, cfg.warmup);
  nlohmann::json j{{"mode", to_string(lm->model.kind())},
                   {"k", lm->model.kind() == TrackerKind::fast ? cfg.k : 1},
                   {"outputs", r.outputs},
                   {"median_us", r.median_us},
                   {"p95_us", r.p95_us},
                   {"outputs_per_second", r.outputs_per_second},
                   {"flops_per_output", r.flops_per_output}};
  if (!c.out.empty()) {
    claim_output(c.out, c.overwrite, false);
    std::ofstream(c.out) << j.dump(2) << "\n";
  }
  std::cout << j.dump(2) << "\n";
  return kOk;
}

int cmd_gradcheck(const Common& c, const std::vector<std::string>& extras) {
  const RunConfig cfg = resolve_config(c.config, extras);
  bool ok = true;
  for (const auto& r : run_gradient_suite(cfg.seed)) {
    std::cout << std::left << std::setw(18) << r.name << " max rel err " << std::scientific << std::setprecision(3)
              << r.report.max_rel_error() << std::defaultfloat << (r.report.pass ? "  pass" : "  FAIL") << "\n";
    ok = ok && r.report.pass;
  }
  return ok ? kOk : kNumeric;
}

int cmd_params(const Common& c, const std::vector<std::string>& extras) {
  const RunConfig cfg = resolve_config(c.config, extras);
  for (TrackerKind kind : {TrackerKind::slow, TrackerKind::fast}) {
    const Tracker<float> t(cfg.model, kind, cfg.seed);
    std::cout << to_string(kind) << " tracker (" << cfg.scale << ", C=" << cfg.model.embed_dim << ", depth "
              << t.depth() << ")\n";
    for (const auto& [name, n] : t.parameter_breakdown())
      std::cout << "  " << std::left << std::setw(12) << name << std::right << std::setw(12) << n << "\n";
    const auto total = t.params().num_parameters();
    std::cout << "  " << std::left << std::setw(12) << "total" << std::right << std::setw(12) << total << "  ("
              << std::fixed << std::setprecision(2) << double(total) / 1e6 << "M)\n"
              << std::defaultfloat;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Event-camera slow/fast tracker: data, training, tracking, evaluation"};
  app.require_subcommand(1);
  Common common;
  std::string mode, data_dir, init, ckpt, sequence, slow_ckpt, fast_ckpt;
  bool resume = false;

  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", common.config, "key=value config file");
    s->add_flag("--overwrite", common.overwrite, "replace an existing output");
    s->allow_extras();
    s->footer("Any config key may be overridden with --<key> <value>.");
    return s;
  };
  auto* gen = add_common(app.add_subcommand("gen-data", "generate a synthetic dataset"));
  gen->add_option("--out", common.out, "output directory")->required();
  auto* train = add_common(app.add_subcommand("train", "stage-1 training of one tracker"));
  train->add_option("--mode", mode, "slow|fast")->required();
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", common.out, "run directory")->required();
  train->add_option("--init", init, "copy matching tensors from this checkpoint");
  train->add_flag("--resume", resume, "continue from the run directory's checkpoint");
  auto* ft = add_common(app.add_subcommand("finetune", "stage-2 distillation into the fast tracker"));
  ft->add_option("--data", data_dir, "dataset directory")->required();
  ft->add_option("--slow", slow_ckpt, "slow (teacher) checkpoint");
  ft->add_option("--fast", fast_ckpt, "fast (student) checkpoint");
  ft->add_option("--out", common.out, "run directory")->required();
  ft->add_flag("--resume", resume, "continue from the run directory's checkpoint");
  auto* track = add_common(app.add_subcommand("track", "track one sequence"));
  track->add_option("--ckpt", ckpt, "checkpoint")->required();
  track->add_option("--sequence", sequence, "sequence directory")->required();
  track->add_option("--out", common.out, "results file")->required();
  track->add_option("--mode", mode, "slow|fast (must match the checkpoint)");
  auto* ev = add_common(app.add_subcommand("eval", "track and score every sequence of a dataset"));
  ev->add_option("--ckpt", ckpt, "checkpoint")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--out", common.out, "report directory")->required();
  ev->add_option("--mode", mode, "slow|fast (must match the checkpoint)");
  auto* bench = add_common(app.add_subcommand("bench", "latency and FLOPs per output"));
  bench->add_option("--ckpt", ckpt, "checkpoint (random weights if absent)");
  bench->add_option("--sequence", sequence, "sequence directory (synthetic if absent)");
  bench->add_option("--mode", mode, "slow|fast");
  bench->add_option("--out", common.out, "optional JSON report");
  auto* gc = add_common(app.add_subcommand("gradcheck", "finite-difference gradient suite"));
  auto* params = add_common(app.add_subcommand("params", "per-module parameter counts"));

  try {
    app.parse(argc, argv);
    auto* sub = app.get_subcommands().front();
    const auto extras = sub->remaining();
    if (sub == gen) return cmd_gen_data(common, extras);
    if (sub == train) return cmd_train(common, extras, mode, data_dir, init, resume);
    if (sub == ft) return cmd_finetune(common, extras, data_dir, slow_ckpt, fast_ckpt, resume);
    if (sub == track) return cmd_track(common, extras, ckpt, sequence, mode);
    if (sub == ev) return cmd_eval(common, extras, ckpt, data_dir, mode);
    if (sub == bench) return cmd_bench(common, extras, ckpt, sequence, mode);
    if (sub == gc) return cmd_gradcheck(common, extras);
    if (sub == params) return cmd_params(common, extras);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ArgumentError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
