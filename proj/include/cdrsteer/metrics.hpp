#pragma once

// Evaluation quantities for steered generations.

#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace cdrsteer {

// Undefined ratios are reported with this marker instead of 0 or NaN.
inline constexpr std::string_view kUndefinedMarker = "—";

enum class HardLabel { Utilitarian, Deontological, None };

struct EvalRecord {
  int prompt_id = 0;
  double alpha_u = 0.0;
  bool compliant = false;
  HardLabel hard_label = HardLabel::None;
  double p_uti = 0.0;
  double p_deo = 0.0;
  std::optional<double> u_op;
};

struct HardLabelRates {
  std::optional<double> u_ip;  // over compliant records
  std::optional<double> d_ip;
  double incr = 0.0;           // over all records
};

HardLabelRates hard_label_rate(std::span<const EvalRecord> records);

// p_uti / (p_uti + p_deo); nullopt when both are zero.
std::optional<double> token_prob_ratio(std::span<const double> dist, int token_u, int token_d);

// Mean |observed - target|.
double mae(std::span<const double> observed, std::span<const double> targets);

struct ControlRankMetrics {
  double rho = 0.0;  // mean per-prompt Spearman(α, U_op)
  double mvr = 0.0;  // mean per-prompt adjacent-decrease rate
};

struct ControlSeries {
  std::vector<double> alpha;
  std::vector<double> u_op;
};

// Fraction of adjacent decreases after sorting by α. Throws on tied α.
double monotonicity_violation_rate(const ControlSeries& series);

ControlRankMetrics control_rank_metrics(std::span<const ControlSeries> per_prompt);

struct CalibrationRow {
  double alpha_u = 0.0;
  std::optional<double> mean_u_op;
  std::optional<double> u_ip;
  std::optional<double> deviation_pp;  // (Ū_op - α_U) · 100
  double incr = 0.0;
};

struct CalibrationReport {
  std::vector<CalibrationRow> rows;
  double mae_pp = 0.0;
  ControlRankMetrics rank;
};

// Rows in ascending α order; ρ and MVR pair records by prompt_id.
CalibrationReport build_calibration_report(std::span<const EvalRecord> records);

// CSV: alpha_u,mean_u_op,u_ip,deviation_pp,incr
void write_calibration_csv(std::ostream& out, const CalibrationReport& report);
// JSON: {mae_pp, rho, mvr}
void write_calibration_summary_json(std::ostream& out, const CalibrationReport& report);

std::string_view hard_label_name(HardLabel label);
HardLabel parse_hard_label(std::string_view name);

}  // namespace cdrsteer
