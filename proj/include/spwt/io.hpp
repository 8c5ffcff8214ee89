#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "spwt/container.hpp"
#include "spwt/flops.hpp"
#include "spwt/freeze_plan.hpp"
#include "spwt/mask.hpp"
#include "spwt/model.hpp"
#include "spwt/spectrum.hpp"

namespace spwt {

using nlohmann::json;

// Shortest round-trip decimal, '.' separator regardless of locale.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, end);
}

inline std::string sha256_hex(std::span<const std::uint8_t> data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: digest failed");
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string sha256_hex(const std::string& s) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string sha256_file(const std::filesystem::path& p) { return sha256_hex(read_bytes(p)); }

// ---- model spec -----------------------------------------------------------

inline json to_json(const ModelSpec& s) {
  json acts = json::array();
  for (auto a : s.activations) acts.push_back(to_string(a));
  return {{"layer_dims", s.layer_dims}, {"activations", acts}, {"layer_names", s.layer_names}};
}

inline ModelSpec model_spec_from_json(const json& j) {
  ModelSpec s;
  s.layer_dims = j.at("layer_dims").get<std::vector<std::size_t>>();
  for (const auto& a : j.at("activations")) s.activations.push_back(parse_activation(a.get<std::string>()));
  if (j.contains("layer_names")) {
    s.layer_names = j.at("layer_names").get<std::vector<std::string>>();
  } else {
    for (std::size_t i = 0; i + 1 < s.layer_dims.size(); ++i) s.layer_names.push_back("fc" + std::to_string(i));
  }
  s.validate();
  return s;
}

// ---- checkpoints ----------------------------------------------------------

struct Checkpoint {
  ModelSpec spec;
  ParameterStore params;
};

inline ContainerFile to_container(const Checkpoint& ck) {
  ck.params.check_matches(ck.spec);
  ContainerFile c;
  for (std::size_t i = 0; i < ck.spec.num_layers(); ++i) {
    const auto& w = ck.params.weights[i];
    const auto& name = ck.spec.layer_names[i];
    c.entries.push_back(Tensor::from_f64(name + ".weight", {w.rows(), w.cols()}, w.data()));
    c.entries.push_back(Tensor::from_f64(name + ".bias", {ck.params.biases[i].size()}, ck.params.biases[i]));
  }
  c.metadata = {{"kind", "checkpoint"},
                {"model", to_json(ck.spec)},
                {"init", {{"seed", ck.params.init.seed}, {"scheme", ck.params.init.scheme}}}};
  return c;
}

inline Checkpoint checkpoint_from_container(const ContainerFile& c) {
  try {
    if (c.metadata.value("kind", "") != "checkpoint") throw FormatError("container is not a checkpoint");
    Checkpoint ck;
    ck.spec = model_spec_from_json(c.metadata.at("model"));
    ck.params.init.seed = c.metadata.at("init").at("seed").get<std::uint64_t>();
    ck.params.init.scheme = c.metadata.at("init").at("scheme").get<std::string>();
    for (std::size_t i = 0; i < ck.spec.num_layers(); ++i) {
      const auto& name = ck.spec.layer_names[i];
      const auto& w = c.at(name + ".weight");
      const auto& b = c.at(name + ".bias");
      if (w.dtype == DType::u8 || b.dtype == DType::u8) throw FormatError("checkpoint: '" + name + "' is not floating point");
      if (w.shape != std::vector<std::size_t>{ck.spec.layer_dims[i], ck.spec.layer_dims[i + 1]} ||
          b.shape != std::vector<std::size_t>{ck.spec.layer_dims[i + 1]})
        throw FormatError("checkpoint: shape of '" + name + "' does not match the model spec");
      ck.params.weights.emplace_back(w.shape[0], w.shape[1], w.as_f64());
      ck.params.biases.push_back(b.as_f64());
    }
    return ck;
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& p, const Checkpoint& ck) { write_container(p, to_container(ck)); }
inline Checkpoint load_checkpoint(const std::filesystem::path& p) { return checkpoint_from_container(read_container(p)); }

// ---- masks ----------------------------------------------------------------

inline ContainerFile to_container(const SparsityMask& m, const json& extra = json::object()) {
  ContainerFile c;
  json layers = json::array();
  for (const auto& l : m.layers) {
    c.entries.push_back(Tensor::from_u8(l.name + ".mask", {l.rows, l.cols}, l.keep));
    layers.push_back(l.name);
  }
  json history = json::array();
  for (const auto& h : m.history)
    history.push_back({{"round", h.round}, {"threshold", h.threshold}, {"remaining_fraction", h.remaining_fraction}});
  c.metadata = {{"kind", "mask"}, {"layers", layers}, {"history", history}};
  for (auto it = extra.begin(); it != extra.end(); ++it) c.metadata[it.key()] = it.value();
  return c;
}

inline SparsityMask mask_from_container(const ContainerFile& c) {
  try {
    if (c.metadata.value("kind", "") != "mask") throw FormatError("container is not a mask file");
    SparsityMask m;
    for (const auto& name : c.metadata.at("layers")) {
      const auto layer = name.get<std::string>();
      const auto& t = c.at(layer + ".mask");
      if (t.dtype != DType::u8 || t.shape.size() != 2) throw FormatError("mask: '" + layer + "' must be a 2-D u8 tensor");
      for (auto b : t.bytes)
        if (b > 1) throw FormatError("mask: '" + layer + "' has values outside {0,1}");
      m.layers.push_back({layer, t.shape[0], t.shape[1], t.bytes});
    }
    for (const auto& h : c.metadata.at("history"))
      m.history.push_back({h.at("round").get<int>(), h.at("threshold").get<double>(),
                           h.at("remaining_fraction").get<double>()});
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("mask: bad metadata: ") + e.what());
  }
}

inline void save_mask(const std::filesystem::path& p, const SparsityMask& m, const json& extra = json::object()) {
  write_container(p, to_container(m, extra));
}
inline SparsityMask load_mask(const std::filesystem::path& p) { return mask_from_container(read_container(p)); }

// ---- freeze plans ---------------------------------------------------------

inline json to_json(const FreezePlan& p) {
  json layers = json::array();
  for (std::size_t i = 0; i < p.size(); ++i)
    layers.push_back({{"name", p.layer_names[i]}, {"alpha", p.alpha_snapshot[i]}, {"frozen", static_cast<bool>(p.frozen[i])}});
  return {{"freeze_ratio", p.freeze_ratio}, {"frozen_count", p.frozen_count()}, {"layers", layers}};
}

inline FreezePlan freeze_plan_from_json(const json& j) {
  try {
    FreezePlan p;
    p.freeze_ratio = j.at("freeze_ratio").get<double>();
    for (const auto& l : j.at("layers")) {
      p.layer_names.push_back(l.at("name").get<std::string>());
      p.alpha_snapshot.push_back(l.value("alpha", 0.0));
      p.frozen.push_back(l.at("frozen").get<bool>());
    }
    return p;
  } catch (const json::exception& e) {
    throw FormatError(std::string("freeze plan: ") + e.what());
  }
}

// ---- spectrum report ------------------------------------------------------

struct SpectrumRecord {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  PowerLawFit fit;
  bool frozen = false;
};

inline std::string spectrum_csv(const std::vector<SpectrumRecord>& recs) {
  std::string s = "layer,N,M,n_tail,xmin,alpha,ks,frozen\n";
  for (const auto& r : recs) {
    s += r.name + "," + std::to_string(r.rows) + "," + std::to_string(r.cols) + "," + std::to_string(r.fit.n_tail) + "," +
         format_double(r.fit.xmin) + "," + format_double(r.fit.alpha) + "," + format_double(r.fit.ks_statistic) + "," +
         (r.frozen ? "1" : "0") + "\n";
  }
  return s;
}

inline json spectrum_json(const std::vector<SpectrumRecord>& recs) {
  json layers = json::array();
  for (const auto& r : recs)
    layers.push_back({{"name", r.name},
                      {"N", r.rows},
                      {"M", r.cols},
                      {"n_tail", r.fit.n_tail},
                      {"xmin", r.fit.xmin},
                      {"alpha", r.fit.alpha},
                      {"ks", r.fit.ks_statistic},
                      {"frozen", r.frozen},
                      {"over_trained", over_trained(r.fit)}});
  return {{"layers", layers}};
}

// ---- FLOPs ledger ---------------------------------------------------------

inline std::string flops_csv(const FlopsLedger& l) {
  std::string s = "layer,C,sigma,frozen,forward,backward\n";
  for (const auto& e : l.entries)
    s += e.cost.layer_name + "," + std::to_string(e.cost.dense_flops) + "," + format_double(e.cost.sparsity) + "," +
         (e.cost.frozen ? "1" : "0") + "," + to_string(e.flops.forward) + "," + to_string(e.flops.backward) + "\n";
  return s;
}

// Integer totals are emitted as decimal strings so 128-bit values survive JSON.
inline json flops_json(const FlopsLedger& l) {
  return {{"iterations", l.iterations},
          {"per_iteration_forward", to_string(l.per_iteration_forward)},
          {"per_iteration_backward", to_string(l.per_iteration_backward)},
          {"per_iteration_total", to_string(l.per_iteration_total)},
          {"run_total", to_string(l.run_total)},
          {"dense_inference_total", to_string(l.dense_inference_total)},
          {"dense_training_total", to_string(l.dense_training_total())},
          {"ratio_to_dense_inference", l.ratio_to_dense_inference()},
          {"ratio_to_dense_training", l.ratio_to_dense_training()}};
}

inline std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

}  // namespace spwt
