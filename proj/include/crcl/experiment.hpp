#pragma once

#include <optional>
#include <string>
#include <vector>

#include "crcl/backbone.hpp"
#include "crcl/inference.hpp"
#include "crcl/learners.hpp"
#include "crcl/stream.hpp"

namespace crcl {

enum class Method { bicrcl, finetune, joint };

Method parse_method(const std::string& name);
std::string method_name(Method m);

struct ExperimentConfig {
  // [stream]
  std::string manifest;
  int tasks = 4;
  TaskOrder order = TaskOrder::given;
  std::uint64_t seed = 0;
  Method method = Method::bicrcl;
  std::string output_dir = "out";
  bool emit_predictions = false;

  // [backbone]
  BackboneConfig backbone;  // input_dim 0 = infer from data
  int bottleneck_dim = 64;
  std::string backbone_weights;  // optional CRCLBK1 file

  // [train]
  TrainConfig train;

  // [consolidation]
  ConsolidationConfig consolidation;

  // [analytic]
  int expansion_dim = 0;  // 0 = 4 * embed_dim
  double beta = 0.0;      // 0 = cross-validated grid selection

  // [fusion]
  FusionConfig fusion;
};

/// Parses a line-oriented `key = value` config with bracketed section
/// headers. Unset keys keep their defaults.
ExperimentConfig parse_config(const std::string& path);

/// All violations at once, as human-readable strings with key paths.
std::vector<std::string> validate_config(const ExperimentConfig& cfg);

/// Canonical serialization; parsing it back yields an identical config.
std::string config_to_string(const ExperimentConfig& cfg);

struct ExperimentResult {
  SessionResult sessions;
  double beta = 1.0;
  bool beta_fallback = false;
  std::string report_json;  // path of the written report
};

/// Runs the configured method end to end, writing the JSON/CSV report and a
/// per-session checkpoint into the output directory. resume_from, when given,
/// restores a session-boundary checkpoint and continues from there.
ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::optional<std::string>& resume_from =
                                    std::nullopt);

}  // namespace crcl
