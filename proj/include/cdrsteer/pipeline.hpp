#pragma once

// End-to-end stages over file artifacts. Every artifact embeds the schema
// version and the hash of the configuration that produced it; stages refuse
// artifacts with a different hash.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cdrsteer/dlc.hpp"
#include "cdrsteer/ffn_align.hpp"
#include "cdrsteer/metrics.hpp"
#include "cdrsteer/probing.hpp"
#include "cdrsteer/toymodel.hpp"
#include "json.hpp"

namespace cdrsteer {

inline constexpr int kSchemaVersion = 1;

namespace artifact {
inline constexpr std::string_view head_scores = "head_scores.csv";
inline constexpr std::string_view probe_data_u = "probe_data_U.jsonl";
inline constexpr std::string_view probe_data_d = "probe_data_D.jsonl";
inline constexpr std::string_view probe_weights = "probe_weights.json";
inline constexpr std::string_view ffn_selection = "ffn_selection.csv";
inline constexpr std::string_view branch_points = "branch_points.json";
inline constexpr std::string_view binary_traces_u = "binary_traces_U.jsonl";
inline constexpr std::string_view binary_traces_d = "binary_traces_D.jsonl";
inline constexpr std::string_view directions = "directions.json";
inline constexpr std::string_view steer_manifest = "steer_manifest.json";
inline constexpr std::string_view audit_log = "audit_log.csv";
inline constexpr std::string_view eval_records = "eval_records.jsonl";
inline constexpr std::string_view calibration_report = "calibration_report.csv";
inline constexpr std::string_view calibration_summary = "calibration_summary.json";
}  // namespace artifact

struct PipelineConfig {
  ModelConfig model;
  PlantSpec plant = PlantSpec::standard(ModelConfig{});

  // probing
  int n_probe = 200;
  ProbeOptions probe;

  // thresholds
  HeadThresholds gamma_attn{0.4, 0.4};
  std::array<double, 2> gamma_ffn{0.5, 0.5};  // [framework]
  StdConvention std_convention = StdConvention::Population;
  double tau = 1.0;

  // extraction
  CspOptions csp;

  // steering
  SteeringConfig steering;
  std::vector<double> alpha_grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};

  // prompts
  int n_steer = 64;  // N_s prompts recorded under binary control
  int n_eval = 64;   // prompts generated at each α
  std::uint64_t prompt_seed = 7;
  int gen_steps = 1;  // the toy answer is one indicator token

  std::filesystem::path out_dir = "out";

  void validate() const;
};

nlohmann::json config_to_json(const PipelineConfig& config);
// Missing keys keep their defaults; unknown keys are rejected.
PipelineConfig config_from_json(const nlohmann::json& j);
PipelineConfig load_config(const std::filesystem::path& path);
std::string config_template();

// FNV-1a of the canonical configuration JSON without the output directory,
// as 16 lowercase hex digits.
std::string config_hash(const PipelineConfig& config);

enum class Stage { Probe, FfnScan, Branch, Binary, Extract, Steer, Evaluate, Pipeline };

std::string_view stage_name(Stage stage);
Stage parse_stage(std::string_view name);

// Missing, corrupt, stale or version-mismatched artifact; the message names
// the file.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Runs one stage (or every stage for Stage::Pipeline), reading and writing
// artifacts under config.out_dir. Progress lines go to `log` when given.
void run_stage(const PipelineConfig& config, Stage stage, std::ostream* log = nullptr);

EvalRecord make_eval_record(const Model& model, const GenerationResult& generation, double alpha_u);

}  // namespace cdrsteer
