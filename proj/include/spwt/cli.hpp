#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "spwt/errors.hpp"
#include "spwt/io.hpp"
#include "spwt/pipeline.hpp"

namespace spwt::cli {

namespace fs = std::filesystem;

// SPWT_THREADS caps analysis parallelism; defaults to the available cores.
inline unsigned analysis_threads() {
  if (const char* env = std::getenv("SPWT_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

struct Options {
  std::optional<std::uint64_t> seed;
  std::string out;
};

inline ExperimentConfig resolve_config(const std::string& path, const Options& o) {
  auto cfg = load_config(path);
  if (o.seed) apply_seed(cfg, *o.seed);
  if (!o.out.empty()) cfg.output_dir = o.out;
  return cfg;
}

inline void print_hash(std::ostream& out, const std::string& hash) { out << "config-hash: " << hash << "\n"; }

// ---- analyze --------------------------------------------------------------

struct AnalyzeArgs {
  std::string checkpoint;
  std::string mask;
  double freeze_ratio = kDefaultFreezeRatio;
  std::string out = "analysis";
};

inline std::string strip_suffix(const std::string& s, const std::string& suffix) {
  return s.ends_with(suffix) ? s.substr(0, s.size() - suffix.size()) : s;
}

// Spectrum + freeze plan for every floating-point tensor of rank >= 2 in a container.
inline int cmd_analyze(const AnalyzeArgs& a, std::ostream& out, std::ostream& err) {
  const auto ck = read_container(a.checkpoint);
  std::optional<ContainerFile> mask;
  if (!a.mask.empty()) mask = read_container(a.mask);

  json hash_input = {{"command", "analyze"}, {"checkpoint", sha256_file(a.checkpoint)}, {"freeze_ratio", a.freeze_ratio}};
  if (mask) hash_input["mask"] = sha256_file(a.mask);
  print_hash(out, sha256_hex(hash_input.dump()));

  std::vector<std::pair<std::string, DenseMatrix>> layers;
  for (const auto& t : ck.entries) {
    if (t.dtype == DType::u8 || t.shape.size() < 2) continue;
    const std::string layer = strip_suffix(t.name, ".weight");
    auto values = t.as_f64();
    if (mask) {
      const auto* m = mask->find(layer + ".mask");
      if (m == nullptr) throw FormatError("analyze: mask has no entry for layer '" + layer + "'");
      if (m->shape != t.shape) throw FormatError("analyze: mask shape differs for layer '" + layer + "'");
      for (std::size_t i = 0; i < values.size(); ++i)
        if (!m->bytes[i]) values[i] = 0.0;
    }
    try {
      layers.emplace_back(layer, matricize(WeightTensor{layer, t.shape, std::move(values)}));
    } catch (const std::invalid_argument& e) {
      throw FormatError(std::string("analyze: ") + e.what());
    }
  }
  if (layers.empty()) throw FormatError("analyze: no weight matrices found in '" + a.checkpoint + "'");

  const auto analysis = analyze_layers(layers, analysis_threads());
  bool failed = false;
  for (const auto& x : analysis) {
    if (!x.fit) {
      err << "fit failed: " << x.spectrum.layer_name << ": " << x.error << "\n";
      failed = true;
    }
  }
  if (failed) return static_cast<int>(ExitCode::fit);

  std::vector<std::string> names;
  std::vector<double> alphas;
  for (const auto& x : analysis) {
    names.push_back(x.spectrum.layer_name);
    alphas.push_back(x.fit->alpha);
  }
  const auto plan = make_freeze_plan(names, alphas, a.freeze_ratio);
  std::vector<SpectrumRecord> recs;
  for (std::size_t i = 0; i < analysis.size(); ++i)
    recs.push_back({names[i], analysis[i].spectrum.rows, analysis[i].spectrum.cols, *analysis[i].fit,
                    static_cast<bool>(plan.frozen[i])});
  const fs::path dir = a.out;
  write_text_atomic(dir / "spectrum.csv", spectrum_csv(recs));
  write_text_atomic(dir / "spectrum.json", dump_json(spectrum_json(recs)));
  write_text_atomic(dir / "plan.json", dump_json(to_json(plan)));
  for (const auto& r : recs)
    out << r.name << "  alpha=" << format_double(r.fit.alpha) << (r.frozen ? "  frozen" : "  active")
        << (over_trained(r.fit) ? "  (alpha < 2)" : "") << "\n";
  out << "frozen " << plan.frozen_count() << " of " << plan.size() << " layers\n";
  return 0;
}

// ---- flops ----------------------------------------------------------------

struct FlopsArgs {
  std::string config;
  std::string plan;
  std::string mask;
  std::optional<double> sparsity;
  std::optional<std::size_t> iterations;
  std::optional<std::size_t> batch;
};

inline int cmd_flops(const FlopsArgs& a, const Options& o, std::ostream& out) {
  const auto cfg = resolve_config(a.config, o);
  print_hash(out, config_hash(cfg));
  const auto& spec = cfg.model;
  FreezePlan plan = FreezePlan::all_active(spec.layer_names);
  if (!a.plan.empty()) {
    std::ifstream in(a.plan);
    if (!in) throw FormatError("cannot open plan '" + a.plan + "'");
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw FormatError(std::string("plan: ") + e.what());
    }
    plan = freeze_plan_from_json(j);
    if (plan.layer_names != spec.layer_names) throw FormatError("flops: plan layers do not match the config model");
  }
  SparsityMask mask = ones_mask(spec.shapes());
  if (!a.mask.empty()) {
    mask = load_mask(a.mask);
    if (mask.layers.size() != spec.num_layers()) throw FormatError("flops: mask layers do not match the config model");
  }
  const std::size_t batch = a.batch.value_or(cfg.finetune.batch_size);
  auto costs = layer_costs(spec, mask, plan, batch);
  if (a.sparsity)
    for (auto& c : costs) c.sparsity = *a.sparsity;
  const auto ledger = model_training_flops(costs, a.iterations.value_or(cfg.finetune.iterations));
  const fs::path dir = cfg.output_dir;
  write_text_atomic(dir / "flops.csv", flops_csv(ledger));
  write_text_atomic(dir / "flops.json", dump_json(flops_json(ledger)));
  out << "per-iteration FLOPs " << to_string(ledger.per_iteration_total) << "\n"
      << "ratio vs dense inference " << format_double(ledger.ratio_to_dense_inference()) << "\n"
      << "ratio vs dense training " << format_double(ledger.ratio_to_dense_training()) << "\n";
  return 0;
}

// ---- entry point ----------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sparse subnetwork search and spectrum-guided selective fine-tuning"};
  app.require_subcommand(1);
  Options opt;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", opt.seed, "Override every seed in the config");
    sub->add_option("--out", opt.out, "Output directory");
  };

  AnalyzeArgs analyze;
  auto* c_analyze = app.add_subcommand("analyze", "Per-layer power-law spectrum and freeze plan of a checkpoint");
  c_analyze->add_option("checkpoint", analyze.checkpoint)->required();
  c_analyze->add_option("--mask", analyze.mask, "Mask file applied before analysis");
  c_analyze->add_option("--freeze-ratio", analyze.freeze_ratio)->check(CLI::Range(0.0, 1.0));
  add_common(c_analyze);

  std::string config_path;
  auto* c_prune = app.add_subcommand("prune", "Iterative magnitude pruning with the distillation loss");
  c_prune->add_option("config", config_path)->required();
  add_common(c_prune);

  std::string mask_path, checkpoint_path;
  std::optional<double> freeze_ratio;
  auto* c_finetune = app.add_subcommand("finetune", "Selective-layer fine-tuning under a mask");
  c_finetune->add_option("config", config_path)->required();
  c_finetune->add_option("--mask", mask_path)->required();
  c_finetune->add_option("--checkpoint", checkpoint_path)->required();
  c_finetune->add_option("--freeze-ratio", freeze_ratio)->check(CLI::Range(0.0, 1.0));
  add_common(c_finetune);

  auto* c_transfer = app.add_subcommand("transfer", "Transfer a mask onto another architecture and fine-tune it");
  c_transfer->add_option("config", config_path, "Target experiment config")->required();
  c_transfer->add_option("--mask", mask_path)->required();
  c_transfer->add_option("--checkpoint", checkpoint_path)->required();
  add_common(c_transfer);

  FlopsArgs flops;
  auto* c_flops = app.add_subcommand("flops", "Training FLOPs ledger for a model, plan and mask");
  c_flops->add_option("config", flops.config)->required();
  c_flops->add_option("--plan", flops.plan, "Freeze plan JSON");
  c_flops->add_option("--mask", flops.mask, "Mask file giving per-layer sparsity");
  c_flops->add_option("--sparsity", flops.sparsity, "Uniform remaining fraction for every layer");
  c_flops->add_option("--iterations", flops.iterations);
  c_flops->add_option("--batch", flops.batch);
  add_common(c_flops);

  std::string run_dir;
  auto* c_report = app.add_subcommand("report", "Bundle a run directory and write its digest manifest");
  c_report->add_option("run_dir", run_dir)->required();
  add_common(c_report);

  auto* c_verify = app.add_subcommand("verify", "Check a run directory against its manifest");
  c_verify->add_option("run_dir", run_dir)->required();
  add_common(c_verify);

  auto* c_run = app.add_subcommand("run", "prune, finetune and report in one go");
  c_run->add_option("config", config_path)->required();
  add_common(c_run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n";
    return static_cast<int>(ExitCode::input);
  }

  try {
    if (c_analyze->parsed()) {
      if (!opt.out.empty()) analyze.out = opt.out;
      return cmd_analyze(analyze, out, err);
    }
    if (c_prune->parsed()) {
      const auto cfg = resolve_config(config_path, opt);
      print_hash(out, config_hash(cfg));
      const auto r = stage_prune(cfg);
      out << "rounds " << r.mask.history.size() << ", remaining fraction " << format_double(r.mask.remaining_fraction())
          << "\n";
      return 0;
    }
    if (c_finetune->parsed()) {
      auto cfg = resolve_config(config_path, opt);
      if (freeze_ratio) cfg.freeze_ratio = *freeze_ratio;
      print_hash(out, config_hash(cfg));
      const auto r = stage_finetune(cfg, mask_path, checkpoint_path, analysis_threads());
      out << "frozen " << r.plan.frozen_count() << " of " << r.plan.size() << " layers, held-out accuracy "
          << format_double(r.held_out.accuracy) << "\n";
      return 0;
    }
    if (c_transfer->parsed()) {
      const auto cfg = resolve_config(config_path, opt);
      print_hash(out, config_hash(cfg));
      const auto r = stage_transfer(cfg, mask_path, checkpoint_path, analysis_threads());
      out << "coverage " << format_double(r.report.coverage) << " (" << r.report.matched.size() << " matched, "
          << r.report.unmatched.size() << " dense)\n";
      return 0;
    }
    if (c_flops->parsed()) return cmd_flops(flops, opt, out);
    if (c_report->parsed() || c_verify->parsed()) {
      const fs::path dir = run_dir;
      if (fs::exists(dir / "config.json")) print_hash(out, config_hash(load_config(dir / "config.json")));
      if (c_report->parsed()) {
        stage_report(dir);
        out << "report written to " << (dir / "report").string() << "\n";
        return 0;
      }
      const auto bad = verify_manifest(dir);
      for (const auto& b : bad) err << "digest mismatch: " << b << "\n";
      return bad.empty() ? 0 : static_cast<int>(ExitCode::input);
    }
    if (c_run->parsed()) {
      const auto cfg = resolve_config(config_path, opt);
      print_hash(out, config_hash(cfg));
      run_pipeline(cfg, analysis_threads());
      out << "run complete: " << cfg.output_dir << "\n";
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::input);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace spwt::cli
