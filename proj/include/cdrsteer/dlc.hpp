#pragma once

// Dual logit calibration: the minimum-norm update of a state h such that
// softmax(k·u·h', k·d·h') equals a target preference.

#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "cdrsteer/cdr.hpp"
#include "cdrsteer/csp.hpp"
#include "cdrsteer/linalg.hpp"
#include "cdrsteer/toymodel.hpp"

namespace cdrsteer {

class PreferenceVector {
 public:
  // Throws std::invalid_argument off the simplex.
  PreferenceVector(double alpha_u, double alpha_d);
  static PreferenceVector from_u(double alpha_u) { return {alpha_u, 1.0 - alpha_u}; }

  double u() const { return alpha_u_; }
  double d() const { return alpha_d_; }

 private:
  double alpha_u_;
  double alpha_d_;
};

// ln((α_D + ε) / (α_U + ε))
double smoothed_log_ratio(const PreferenceVector& alpha, double eps_log);

struct DlcUpdate {
  Vector delta;    // Δh*
  Vector updated;  // h + Δh*
  double target = 0.0;  // r
};

// a = d - u, b = r/k - a·h, Δh* = (b / ‖a‖²) a. Throws if ‖a‖ < 1e-12.
DlcUpdate dlc_update(std::span<const double> h, std::span<const double> u, std::span<const double> d,
                     const PreferenceVector& alpha, double k = 1.0, double eps_log = 1e-6);

struct StepAudit {
  double delta_norm = 0.0;
  double pre_gap = 0.0;   // k u·h - k d·h
  double post_gap = 0.0;
};

// Applies dlc_update to `state` in place.
StepAudit steer_step(std::span<double> state, std::span<const double> u, std::span<const double> d,
                     const PreferenceVector& alpha, double k = 1.0, double eps_log = 1e-6);

enum class PipelineMode { Direct, PolarizeThenCalibrate };

std::string_view pipeline_mode_name(PipelineMode mode);
PipelineMode parse_pipeline_mode(std::string_view name);

struct SteeringConfig {
  double k = 1.0;
  double eps_log = 1e-6;
  SteeringSite site = SteeringSite::ResidualPostFfn;
  std::optional<int> single_layer;  // unset: every branch layer
  PipelineMode mode = PipelineMode::Direct;
  int top_k = 0;  // head site; 0 picks the count of thresholded heads, capped at 24

  void validate() const;
};

// Head-local direction pair from the two ridge probes of one head.
struct HeadDirection {
  int layer = 0;
  int head = 0;
  Vector u;
  Vector d;
  double score = 0.0;  // ranking score (mean of the two CV scores)
};

int default_top_k(const HeadScoreMap& scores);

// Top-K heads by mean CV score with unit-normalized probe weights.
std::vector<HeadDirection> select_top_k_heads(const HeadScoreMap& scores, std::span<const Vector> probe_u,
                                              std::span<const Vector> probe_d, int k);

// Intervention list realizing one steering step configuration at α.
// Residual and down-output sites use `pairs`; the head site uses `heads`.
std::vector<Intervention> steering_interventions(std::span<const DirectionPair> pairs,
                                                 std::span<const HeadDirection> heads, const PreferenceVector& alpha,
                                                 const SteeringConfig& config);

struct FineGrainedPoint {
  double alpha_u = 0.0;
  std::vector<GenerationResult> generations;
};

struct FineGrainedRun {
  std::vector<FineGrainedPoint> points;
};

// Direct mode steers only; polarize_then_calibrate first gates toward the
// majority framework (α_U > 0.5 -> utilitarian, otherwise deontological).
FineGrainedRun run_fine_grained(const Model& model, std::span<const Prompt> prompts, std::span<const double> alpha_grid,
                                std::span<const DirectionPair> pairs, std::span<const HeadDirection> heads,
                                const BranchPointSet& branch, const SteeringConfig& config,
                                const GenerationOptions& options);

// CSV: prompt_id,alpha_u,site,layer,head,step,delta_norm,pre_gap,post_gap,post_softmax_u
void write_audit_csv(std::ostream& out, std::span<const AuditEntry> entries);

}  // namespace cdrsteer
