#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "spwt/dataset.hpp"
#include "spwt/distill.hpp"
#include "spwt/errors.hpp"
#include "spwt/flops.hpp"
#include "spwt/io.hpp"
#include "spwt/model.hpp"
#include "spwt/pruner.hpp"
#include "spwt/spectrum.hpp"
#include "spwt/train.hpp"

namespace spwt {

namespace fs = std::filesystem;

struct PretrainConfig {
  double learning_rate = 0.01;
  std::size_t iterations = 1500;  // 0 skips pretraining
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  ModelSpec model = ModelSpec::mlp({32, 48, 48, 48, 48, 48, 16});
  DatasetConfig data;
  std::uint64_t init_seed = 0;
  PretrainConfig pretrain;
  ImpConfig imp;
  TrainConfig finetune{1e-2, 500, 32, 3};
  double freeze_ratio = kDefaultFreezeRatio;
  double kd_weight = 1.0;
  std::string output_dir = "run";

  void validate() const {
    model.validate();
    data.validate();
    imp.validate();
    finetune.validate();
    if (pretrain.iterations > 0 && !(pretrain.learning_rate > 0.0))
      throw std::invalid_argument("config: pretrain.learning_rate must be > 0");
    if (pretrain.batch_size < 1) throw std::invalid_argument("config: pretrain.batch_size must be >= 1");
    if (!(freeze_ratio >= 0.0 && freeze_ratio <= 1.0)) throw std::invalid_argument("config: freeze_ratio must be in [0,1]");
    if (!(kd_weight >= 0.0)) throw std::invalid_argument("config: kd_weight must be >= 0");
  }
};

// Sets every stage seed from one base seed.
inline void apply_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.data.seed = derive_seed(seed, 0);
  cfg.init_seed = derive_seed(seed, 1);
  cfg.pretrain.seed = derive_seed(seed, 2);
  cfg.imp.seed = derive_seed(seed, 3);
  cfg.finetune.seed = derive_seed(seed, 4);
}

inline json to_json(const ExperimentConfig& c) {
  return {{"model", to_json(c.model)},
          {"data",
           {{"n_train", c.data.n_train},
            {"n_test", c.data.n_test},
            {"n_categories", c.data.n_categories},
            {"noise", c.data.noise},
            {"teacher_noise", c.data.teacher_noise},
            {"seed", c.data.seed}}},
          {"init_seed", c.init_seed},
          {"pretrain",
           {{"learning_rate", c.pretrain.learning_rate},
            {"iterations", c.pretrain.iterations},
            {"batch_size", c.pretrain.batch_size},
            {"seed", c.pretrain.seed}}},
          {"imp",
           {{"target_sparsity", c.imp.target_sparsity},
            {"per_round_rate", c.imp.per_round_rate},
            {"train_iterations", c.imp.train_iterations},
            {"learning_rate", c.imp.learning_rate},
            {"batch_size", c.imp.batch_size},
            {"seed", c.imp.seed}}},
          {"finetune",
           {{"learning_rate", c.finetune.learning_rate},
            {"iterations", c.finetune.iterations},
            {"batch_size", c.finetune.batch_size},
            {"seed", c.finetune.seed}}},
          {"freeze_ratio", c.freeze_ratio},
          {"kd_weight", c.kd_weight},
          {"output_dir", c.output_dir}};
}

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw FormatError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw FormatError("config: unknown key '" + where + "." + it.key() + "'");
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

// Missing keys keep their defaults; unknown keys and wrong types are rejected.
inline ExperimentConfig config_from_json(const json& j) {
  using detail::read_opt;
  using detail::reject_unknown;
  ExperimentConfig c;
  try {
    reject_unknown(j, {"model", "data", "init_seed", "pretrain", "imp", "finetune", "freeze_ratio", "kd_weight", "output_dir"},
                   "root");
    if (j.contains("model")) {
      reject_unknown(j["model"], {"layer_dims", "activations", "layer_names"}, "model");
      c.model = model_spec_from_json(j["model"]);
    }
    if (j.contains("data")) {
      const auto& d = j["data"];
      reject_unknown(d, {"n_train", "n_test", "n_categories", "noise", "teacher_noise", "seed"}, "data");
      read_opt(d, "n_train", c.data.n_train);
      read_opt(d, "n_test", c.data.n_test);
      read_opt(d, "n_categories", c.data.n_categories);
      read_opt(d, "noise", c.data.noise);
      read_opt(d, "teacher_noise", c.data.teacher_noise);
      read_opt(d, "seed", c.data.seed);
    }
    read_opt(j, "init_seed", c.init_seed);
    if (j.contains("pretrain")) {
      const auto& p = j["pretrain"];
      reject_unknown(p, {"learning_rate", "iterations", "batch_size", "seed"}, "pretrain");
      read_opt(p, "learning_rate", c.pretrain.learning_rate);
      read_opt(p, "iterations", c.pretrain.iterations);
      read_opt(p, "batch_size", c.pretrain.batch_size);
      read_opt(p, "seed", c.pretrain.seed);
    }
    if (j.contains("imp")) {
      const auto& p = j["imp"];
      reject_unknown(p, {"target_sparsity", "per_round_rate", "train_iterations", "learning_rate", "batch_size", "seed"}, "imp");
      read_opt(p, "target_sparsity", c.imp.target_sparsity);
      read_opt(p, "per_round_rate", c.imp.per_round_rate);
      read_opt(p, "train_iterations", c.imp.train_iterations);
      read_opt(p, "learning_rate", c.imp.learning_rate);
      read_opt(p, "batch_size", c.imp.batch_size);
      read_opt(p, "seed", c.imp.seed);
    }
    if (j.contains("finetune")) {
      const auto& p = j["finetune"];
      reject_unknown(p, {"learning_rate", "iterations", "batch_size", "seed"}, "finetune");
      read_opt(p, "learning_rate", c.finetune.learning_rate);
      read_opt(p, "iterations", c.finetune.iterations);
      read_opt(p, "batch_size", c.finetune.batch_size);
      read_opt(p, "seed", c.finetune.seed);
    }
    read_opt(j, "freeze_ratio", c.freeze_ratio);
    read_opt(j, "kd_weight", c.kd_weight);
    read_opt(j, "output_dir", c.output_dir);
    c.validate();
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const fs::path& p) {
  if (!fs::exists(p)) throw FormatError("config file '" + p.string() + "' does not exist");
  std::ifstream in(p);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("config: " + std::string(e.what()));
  }
  return config_from_json(j);
}

// Digest of everything that determines the artifacts (the output location does not).
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

// ---- shared helpers -------------------------------------------------------

inline DatasetSplit dataset_for(const ExperimentConfig& c) {
  return make_dataset(c.data, c.model.input_dim(), c.model.embed_dim());
}

inline std::vector<std::pair<std::string, DenseMatrix>> matricized_layers(const ModelSpec& spec,
                                                                          const ParameterStore& params,
                                                                          const SparsityMask& mask) {
  std::vector<std::pair<std::string, DenseMatrix>> out;
  for (std::size_t i = 0; i < spec.num_layers(); ++i) {
    const DenseMatrix w = masked_weight(params.weights[i], mask.layers[i]);
    WeightTensor t{spec.layer_names[i], {w.rows(), w.cols()}, w.values()};
    out.emplace_back(spec.layer_names[i], matricize(t));
  }
  return out;
}

// α per layer; throws NumericalError naming every layer whose fit failed.
inline std::vector<LayerAnalysis> analyze_model(const ModelSpec& spec, const ParameterStore& params,
                                                const SparsityMask& mask, unsigned threads = 1) {
  auto res = analyze_layers(matricized_layers(spec, params, mask), threads);
  std::string failures;
  for (const auto& a : res)
    if (!a.fit) failures += "  " + a.spectrum.layer_name + ": " + a.error + "\n";
  if (!failures.empty()) throw NumericalError("power-law fit failed for:\n" + failures);
  return res;
}

inline std::vector<double> alphas_of(const std::vector<LayerAnalysis>& a) {
  std::vector<double> out;
  for (const auto& x : a) out.push_back(x.fit->alpha);
  return out;
}

inline std::vector<LayerCost> layer_costs(const ModelSpec& spec, const SparsityMask& mask, const FreezePlan& plan,
                                          std::size_t batch) {
  std::vector<LayerCost> out;
  for (std::size_t i = 0; i < spec.num_layers(); ++i)
    out.push_back({spec.layer_names[i], layer_dense_flops(spec.layer_dims[i], spec.layer_dims[i + 1], batch),
                   mask.layers[i].density(), plan.is_frozen(i)});
  return out;
}

inline std::vector<double> subsample(const std::vector<double>& v, std::size_t every) {
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); i += every) out.push_back(v[i]);
  if (!v.empty() && (v.size() - 1) % every != 0) out.push_back(v.back());
  return out;
}

// Mean linear CKA between each layer's features and the teacher embeddings.
inline double mean_cka_to_teacher(const ModelSpec& spec, const ParameterStore& params, const SparsityMask& mask,
                                  const DistillDataset& data) {
  const auto feats = layer_features(params, mask, data.inputs, spec);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& f : feats) {
    try {
      sum += linear_cka(f, data.teacher);
      ++n;
    } catch (const std::invalid_argument&) {
      // A layer with constant output has no defined CKA; it is skipped.
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

// ---- stage: prune ---------------------------------------------------------

struct PruneStageResult {
  SparsityMask mask;
  Checkpoint pretrained;
  Checkpoint pruned;
  std::vector<ImpRoundMetrics> rounds;
  std::vector<double> pretrain_curve;
};

inline std::string history_csv(const SparsityMask& m, const std::vector<ImpRoundMetrics>& rounds) {
  std::string s = "round,threshold,remaining_fraction,mean_train_loss\n";
  for (std::size_t i = 0; i < m.history.size(); ++i) {
    const auto& h = m.history[i];
    s += std::to_string(h.round) + "," + format_double(h.threshold) + "," + format_double(h.remaining_fraction) + "," +
         (i < rounds.size() ? format_double(rounds[i].mean_train_loss) : std::string{}) + "\n";
  }
  return s;
}

inline json imp_config_json(const ImpConfig& c) {
  return {{"target_sparsity", c.target_sparsity}, {"per_round_rate", c.per_round_rate},
          {"train_iterations", c.train_iterations}, {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},           {"seed", c.seed}};
}

// Dense pretraining followed by IMP with the distillation loss only.
inline PruneStageResult run_prune(const ExperimentConfig& cfg, const PruneObserver& observer = {}) {
  cfg.validate();
  const auto data = dataset_for(cfg);
  PruneStageResult r;
  ParameterStore params = initialize(cfg.model, cfg.init_seed);
  if (cfg.pretrain.iterations > 0) {
    TrainOptions opt;
    opt.config = {cfg.pretrain.learning_rate, cfg.pretrain.iterations, cfg.pretrain.batch_size, cfg.pretrain.seed};
    opt.objective = Objective::classify_and_distill;
    opt.kd_weight = cfg.kd_weight;
    auto trained = train(cfg.model, std::move(params), ones_mask(cfg.model.shapes()),
                         FreezePlan::all_active(cfg.model.layer_names), data.train, opt);
    params = std::move(trained.params);
    r.pretrain_curve = std::move(trained.loss_curve);
  }
  r.pretrained = {cfg.model, params};
  auto imp = imp_run(cfg.model, params, data.train, cfg.imp, observer);
  r.mask = std::move(imp.mask);
  r.pruned = {cfg.model, std::move(imp.params)};
  r.rounds = std::move(imp.rounds);
  return r;
}

inline PruneStageResult stage_prune(const ExperimentConfig& cfg) {
  auto r = run_prune(cfg);
  const fs::path dir = fs::path(cfg.output_dir) / "prune";
  // The stored config omits output_dir so run directories can be moved or compared byte for byte.
  json stored = to_json(cfg);
  stored.erase("output_dir");
  write_text_atomic(fs::path(cfg.output_dir) / "config.json", dump_json(stored));
  save_checkpoint(dir / "pretrained.spwt", r.pretrained);
  save_checkpoint(dir / "checkpoint.spwt", r.pruned);
  save_mask(dir / "mask.spwt", r.mask, {{"imp_config", imp_config_json(cfg.imp)}, {"config_hash", config_hash(cfg)}});
  write_text_atomic(dir / "history.csv", history_csv(r.mask, r.rounds));
  json rounds = json::array();
  for (const auto& m : r.rounds) rounds.push_back({{"round", m.round}, {"mean_train_loss", m.mean_train_loss}});
  write_text_atomic(dir / "metrics.json", dump_json({{"config_hash", config_hash(cfg)},
                                                     {"pretrain_loss_curve", subsample(r.pretrain_curve, 25)},
                                                     {"imp_rounds", rounds},
                                                     {"remaining_fraction", r.mask.remaining_fraction()}}));
  return r;
}

// ---- stage: fine-tune -----------------------------------------------------

struct FinetuneResult {
  Checkpoint final;
  SparsityMask mask;
  FreezePlan plan;
  std::vector<SpectrumRecord> spectrum;
  FlopsLedger flops;
  DriftReport drift;
  std::vector<std::size_t> snapshot_iterations;
  std::vector<std::vector<double>> alpha_snapshots;  // [0] is the planning spectrum
  std::vector<double> loss_curve;
  Evaluation held_out;
  double cka_to_teacher = 0.0;
};

// Fits α once on m ⊙ θ, freezes per the static plan, then trains with cross-entropy + TGKD.
inline FinetuneResult run_finetune(const ExperimentConfig& cfg, const ModelSpec& spec, const ParameterStore& start,
                                   const SparsityMask& mask, unsigned threads = 1) {
  cfg.validate();
  start.check_matches(spec);
  check_mask(start, mask);
  ExperimentConfig local = cfg;
  local.model = spec;
  const auto data = dataset_for(local);

  FinetuneResult r;
  r.mask = mask;
  ParameterStore params = apply_mask(start, mask);
  const auto analysis = analyze_model(spec, params, mask, threads);
  const auto alphas = alphas_of(analysis);
  r.plan = make_freeze_plan(spec.layer_names, alphas, cfg.freeze_ratio);
  for (std::size_t i = 0; i < analysis.size(); ++i)
    r.spectrum.push_back({spec.layer_names[i], analysis[i].spectrum.rows, analysis[i].spectrum.cols, *analysis[i].fit,
                          static_cast<bool>(r.plan.frozen[i])});
  r.alpha_snapshots.push_back(alphas);
  r.snapshot_iterations.push_back(0);

  const std::size_t iters = cfg.finetune.iterations;
  const std::size_t cadence = std::max<std::size_t>(1, iters / 5);
  TrainOptions opt;
  opt.config = cfg.finetune;
  opt.objective = Objective::classify_and_distill;
  opt.kd_weight = cfg.kd_weight;
  auto on_step = [&](std::size_t it, const ParameterStore& p, const LossBreakdown&) {
    if (it % cadence != 0 || r.snapshot_iterations.size() > 5) return;
    std::vector<double> snap;
    for (const auto& a : analyze_layers(matricized_layers(spec, p, mask), threads))
      snap.push_back(a.fit ? a.fit->alpha : std::numeric_limits<double>::quiet_NaN());
    r.alpha_snapshots.push_back(std::move(snap));
    r.snapshot_iterations.push_back(it);
  };
  auto trained = train(spec, params, mask, r.plan, data.train, opt, on_step);

  for (std::size_t i = 0; i < spec.num_layers(); ++i) {
    if (!r.plan.frozen[i]) continue;
    if (!(trained.params.weights[i] == params.weights[i]) || trained.params.biases[i] != params.biases[i])
      throw std::logic_error("frozen layer '" + spec.layer_names[i] + "' changed during fine-tuning");
  }

  r.drift = alpha_drift_report(r.alpha_snapshots);
  r.loss_curve = std::move(trained.loss_curve);
  r.final = {spec, std::move(trained.params)};
  r.held_out = evaluate(spec, r.final.params, mask, data.test);
  r.cka_to_teacher = mean_cka_to_teacher(spec, r.final.params, mask, data.test);
  r.flops = model_training_flops(layer_costs(spec, mask, r.plan, cfg.finetune.batch_size), iters);
  return r;
}

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline std::string drift_csv(const FinetuneResult& r) {
  std::string s = "iteration";
  for (const auto& n : r.plan.layer_names) s += "," + n;
  s += ",median\n";
  for (std::size_t t = 0; t < r.alpha_snapshots.size(); ++t) {
    s += std::to_string(r.snapshot_iterations[t]);
    for (double a : r.alpha_snapshots[t]) s += "," + (std::isfinite(a) ? format_double(a) : std::string("nan"));
    s += "," + format_double(r.drift.median_trace[t]) + "\n";
  }
  return s;
}

// Weight counts reported next to FLOPs: all, unmasked, and unmasked in trainable layers.
inline json weight_counts_json(const SparsityMask& mask, const FreezePlan& plan) {
  std::size_t total = 0, active = 0, trainable = 0;
  for (std::size_t i = 0; i < mask.layers.size(); ++i) {
    total += mask.layers[i].keep.size();
    active += mask.layers[i].active();
    if (!plan.frozen[i]) trainable += mask.layers[i].active();
  }
  return {{"total", total}, {"active", active}, {"trainable", trainable}};
}

inline json finetune_metrics_json(const FinetuneResult& r) {
  json drift = json::array();
  for (std::size_t i = 0; i < r.plan.size(); ++i)
    drift.push_back({{"layer", r.plan.layer_names[i]}, {"max_abs_drift", finite_or_null(r.drift.max_abs_drift[i])}});
  json trace = json::array();
  for (double m : r.drift.median_trace) trace.push_back(finite_or_null(m));
  return {{"held_out_accuracy", r.held_out.accuracy},
          {"held_out_distill_loss", r.held_out.distill},
          {"held_out_classification_loss", r.held_out.classification},
          {"cka_to_teacher", r.cka_to_teacher},
          {"finetune_loss_curve", subsample(r.loss_curve, 10)},
          {"frozen_layers", r.plan.frozen_count()},
          {"remaining_fraction", r.mask.remaining_fraction()},
          {"weights", weight_counts_json(r.mask, r.plan)},
          {"alpha_drift", drift},
          {"alpha_median_trace", trace},
          {"alpha_median_of_medians", finite_or_null(r.drift.median_of_medians)},
          {"flops", flops_json(r.flops)}};
}

inline void write_finetune_outputs(const fs::path& dir, const FinetuneResult& r) {
  save_checkpoint(dir / "checkpoint.spwt", r.final);
  save_mask(dir / "mask.spwt", r.mask);
  write_text_atomic(dir / "spectrum.csv", spectrum_csv(r.spectrum));
  write_text_atomic(dir / "spectrum.json", dump_json(spectrum_json(r.spectrum)));
  write_text_atomic(dir / "plan.json", dump_json(to_json(r.plan)));
  write_text_atomic(dir / "flops.csv", flops_csv(r.flops));
  write_text_atomic(dir / "flops.json", dump_json(flops_json(r.flops)));
  write_text_atomic(dir / "drift.csv", drift_csv(r));
  write_text_atomic(dir / "metrics.json", dump_json(finetune_metrics_json(r)));
}

// Consumes only serialized prune outputs.
inline FinetuneResult stage_finetune(const ExperimentConfig& cfg, const fs::path& mask_path, const fs::path& checkpoint_path,
                                     unsigned threads = 1) {
  const auto mask = load_mask(mask_path);
  const auto ck = load_checkpoint(checkpoint_path);
  if (!(ck.spec == cfg.model)) throw FormatError("finetune: checkpoint model does not match the config model");
  try {
    check_mask(ck.params, mask);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("finetune: incompatible mask: ") + e.what());
  }
  auto r = run_finetune(cfg, ck.spec, ck.params, mask, threads);
  write_finetune_outputs(fs::path(cfg.output_dir) / "finetune", r);
  return r;
}

// ---- stage: transfer ------------------------------------------------------

// Target parameters: layers matching the source checkpoint by (name, shape) are copied,
// everything else keeps the target's fresh initialization.
inline ParameterStore transfer_parameters(const Checkpoint& source, const ModelSpec& target, std::uint64_t init_seed) {
  ParameterStore p = initialize(target, init_seed);
  for (std::size_t i = 0; i < target.num_layers(); ++i) {
    const auto it = std::find(source.spec.layer_names.begin(), source.spec.layer_names.end(), target.layer_names[i]);
    if (it == source.spec.layer_names.end()) continue;
    const auto j = static_cast<std::size_t>(it - source.spec.layer_names.begin());
    if (source.params.weights[j].rows() == p.weights[i].rows() && source.params.weights[j].cols() == p.weights[i].cols()) {
      p.weights[i] = source.params.weights[j];
      p.biases[i] = source.params.biases[j];
    }
  }
  return p;
}

inline json to_json(const TransferReport& r) {
  return {{"matched", r.matched}, {"unmatched", r.unmatched}, {"source_unused", r.source_unused}, {"coverage", r.coverage}};
}

struct TransferStageResult {
  TransferReport report;
  FinetuneResult finetune;
};

inline TransferStageResult run_transfer(const ExperimentConfig& target_cfg, const SparsityMask& mask, const Checkpoint& source,
                                        unsigned threads = 1) {
  auto tr = transfer_mask(mask, target_cfg.model);
  const auto params = transfer_parameters(source, target_cfg.model, target_cfg.init_seed);
  return {tr.report, run_finetune(target_cfg, target_cfg.model, params, tr.mask, threads)};
}

inline TransferStageResult stage_transfer(const ExperimentConfig& target_cfg, const fs::path& mask_path,
                                          const fs::path& checkpoint_path, unsigned threads = 1) {
  const auto mask = load_mask(mask_path);
  const auto source = load_checkpoint(checkpoint_path);
  auto r = run_transfer(target_cfg, mask, source, threads);
  const fs::path dir = fs::path(target_cfg.output_dir) / "transfer";
  write_text_atomic(dir / "transfer.json", dump_json(to_json(r.report)));
  write_finetune_outputs(dir, r.finetune);
  return r;
}

// ---- random-mask baselines ------------------------------------------------

// Paired comparison at equal sparsity. The random arm gets the same distillation budget as IMP
// (rounds x t iterations from the pretrained weights), then full fine-tuning; the IMP arm gets
// spectrum-guided selective fine-tuning.
struct BaselineComparison {
  double imp_distill = 0.0;
  double random_distill = 0.0;
  double imp_accuracy = 0.0;
  double random_accuracy = 0.0;
  double remaining_fraction = 0.0;
};

inline constexpr std::uint64_t kRandomMaskStream = 0x52414e44;  // "RAND"

inline BaselineComparison compare_with_random_mask(const ExperimentConfig& cfg, const PruneStageResult& pr,
                                                   unsigned threads = 1) {
  const auto data = dataset_for(cfg);
  BaselineComparison c;
  c.remaining_fraction = pr.mask.remaining_fraction();
  const auto rmask = random_mask(cfg.model.shapes(), c.remaining_fraction, derive_seed(cfg.imp.seed, kRandomMaskStream));

  TrainOptions opt;
  opt.config = {cfg.imp.learning_rate, std::max<std::size_t>(1, cfg.imp.train_iterations * pr.rounds.size()),
                cfg.imp.batch_size, derive_seed(cfg.imp.seed, kRandomMaskStream + 1)};
  const auto random_trained = train(cfg.model, apply_mask(pr.pretrained.params, rmask), rmask,
                                    FreezePlan::all_active(cfg.model.layer_names), data.train, opt);
  c.imp_distill = evaluate(cfg.model, pr.pruned.params, pr.mask, data.test).distill;
  c.random_distill = evaluate(cfg.model, random_trained.params, rmask, data.test).distill;

  c.imp_accuracy = run_finetune(cfg, cfg.model, pr.pruned.params, pr.mask, threads).held_out.accuracy;
  ExperimentConfig full = cfg;
  full.freeze_ratio = 0.0;
  c.random_accuracy = run_finetune(full, cfg.model, random_trained.params, rmask, threads).held_out.accuracy;
  return c;
}

// Transferred IMP mask vs a random mask of the same overall sparsity on a different architecture,
// both fine-tuned from the same transferred parameters.
struct TransferComparison {
  double coverage = 0.0;
  double transferred_distill = 0.0;
  double random_distill = 0.0;
};

inline TransferComparison compare_transfer_with_random(const ExperimentConfig& target_cfg, const PruneStageResult& pr,
                                                       unsigned threads = 1) {
  const auto tr = run_transfer(target_cfg, pr.mask, pr.pruned, threads);
  TransferComparison c;
  c.coverage = tr.report.coverage;
  c.transferred_distill = tr.finetune.held_out.distill;
  const auto rmask = random_mask(target_cfg.model.shapes(), tr.finetune.mask.remaining_fraction(),
                                 derive_seed(target_cfg.imp.seed, kRandomMaskStream));
  const auto params = transfer_parameters(pr.pruned, target_cfg.model, target_cfg.init_seed);
  c.random_distill = run_finetune(target_cfg, target_cfg.model, params, rmask, threads).held_out.distill;
  return c;
}

// ---- stage: report --------------------------------------------------------

inline const std::vector<std::string>& required_run_files() {
  static const std::vector<std::string> files = {
      "config.json",           "prune/mask.spwt",        "prune/checkpoint.spwt", "prune/history.csv",
      "prune/metrics.json",    "finetune/spectrum.csv",  "finetune/flops.csv",    "finetune/plan.json",
      "finetune/metrics.json", "finetune/checkpoint.spwt"};
  return files;
}

inline std::vector<std::string> missing_run_files(const fs::path& run_dir) {
  std::vector<std::string> missing;
  for (const auto& f : required_run_files())
    if (!fs::exists(run_dir / f)) missing.push_back(f);
  return missing;
}

// Every regular file under run_dir except the manifest, as sorted generic relative paths.
inline std::vector<std::string> list_run_files(const fs::path& run_dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), run_dir).generic_string();
    if (rel == "report/manifest.json" || rel.ends_with(".tmp")) continue;
    out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline void copy_file_atomic(const fs::path& from, const fs::path& to) { write_bytes_atomic(to, read_bytes(from)); }

// Bundles spectrum, FLOPs, mask and merged metrics into run_dir/report with a digest manifest.
inline json stage_report(const fs::path& run_dir) {
  const auto missing = missing_run_files(run_dir);
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += "  " + m + "\n";
    throw IncompleteError("report: run directory is incomplete, missing:\n" + list);
  }
  const auto cfg = load_config(run_dir / "config.json");
  const fs::path out = run_dir / "report";
  copy_file_atomic(run_dir / "finetune/spectrum.csv", out / "spectrum.csv");
  copy_file_atomic(run_dir / "finetune/flops.csv", out / "flops.csv");
  copy_file_atomic(run_dir / "prune/mask.spwt", out / "masks/imp_mask.spwt");
  if (fs::exists(run_dir / "finetune/mask.spwt")) copy_file_atomic(run_dir / "finetune/mask.spwt", out / "masks/finetune_mask.spwt");

  auto read_json = [](const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
  };
  json metrics = {{"config_hash", config_hash(cfg)},
                  {"prune", read_json(run_dir / "prune/metrics.json")},
                  {"finetune", read_json(run_dir / "finetune/metrics.json")}};
  if (fs::exists(run_dir / "transfer/metrics.json")) {
    metrics["transfer"] = read_json(run_dir / "transfer/metrics.json");
    if (fs::exists(run_dir / "transfer/transfer.json")) metrics["transfer"]["report"] = read_json(run_dir / "transfer/transfer.json");
  }
  write_text_atomic(out / "metrics.json", dump_json(metrics));

  json files = json::array();
  for (const auto& rel : list_run_files(run_dir)) files.push_back({{"path", rel}, {"sha256", sha256_file(run_dir / rel)}});
  const auto& ft = metrics["finetune"];
  json manifest = {{"config_hash", config_hash(cfg)},
                   {"files", files},
                   {"summary",
                    {{"held_out_accuracy", ft["held_out_accuracy"]},
                     {"held_out_distill_loss", ft["held_out_distill_loss"]},
                     {"cka_to_teacher", ft["cka_to_teacher"]},
                     {"remaining_fraction", ft["remaining_fraction"]},
                     {"flops_per_iteration", ft["flops"]["per_iteration_total"]},
                     {"flops_ratio_to_dense_training", ft["flops"]["ratio_to_dense_training"]}}}};
  write_text_atomic(out / "manifest.json", dump_json(manifest));
  return manifest;
}

// Files whose digest differs from the manifest (or that have disappeared).
inline std::vector<std::string> verify_manifest(const fs::path& run_dir) {
  const fs::path mp = run_dir / "report" / "manifest.json";
  if (!fs::exists(mp)) throw IncompleteError("verify: no manifest at '" + mp.string() + "'");
  std::ifstream in(mp);
  const json manifest = json::parse(in);
  std::vector<std::string> bad;
  for (const auto& f : manifest.at("files")) {
    const auto rel = f.at("path").get<std::string>();
    const fs::path p = run_dir / rel;
    if (!fs::exists(p) || sha256_file(p) != f.at("sha256").get<std::string>()) bad.push_back(rel);
  }
  return bad;
}

// prune -> finetune -> report.
inline json run_pipeline(const ExperimentConfig& cfg, unsigned threads = 1) {
  stage_prune(cfg);
  const fs::path dir = cfg.output_dir;
  stage_finetune(cfg, dir / "prune/mask.spwt", dir / "prune/checkpoint.spwt", threads);
  return stage_report(dir);
}

}  // namespace spwt
