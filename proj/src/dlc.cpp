#include "cdrsteer/dlc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <iterator>

#include "csv.hpp"

namespace cdrsteer {

PreferenceVector::PreferenceVector(double alpha_u, double alpha_d) : alpha_u_(alpha_u), alpha_d_(alpha_d) {
  if (!std::isfinite(alpha_u) || !std::isfinite(alpha_d) || alpha_u < 0.0 || alpha_d < 0.0 ||
      std::abs(alpha_u + alpha_d - 1.0) > 1e-9)
    throw std::invalid_argument("PreferenceVector: weights must be nonnegative and sum to 1");
}

double smoothed_log_ratio(const PreferenceVector& alpha, double eps_log) {
  if (!(eps_log > 0.0)) throw std::invalid_argument("smoothed_log_ratio: eps_log must be > 0");
  return std::log((alpha.d() + eps_log) / (alpha.u() + eps_log));
}

DlcUpdate dlc_update(std::span<const double> h, std::span<const double> u, std::span<const double> d,
                     const PreferenceVector& alpha, double k, double eps_log) {
  if (h.size() != u.size() || h.size() != d.size()) throw std::invalid_argument("dlc_update: length mismatch");
  if (!(k > 0.0)) throw std::invalid_argument("dlc_update: k must be > 0");
  const Vector a = subtract(d, u);
  const double a_sq = dot(a, a);
  if (std::sqrt(a_sq) < 1e-12) throw std::invalid_argument("dlc_update: directions u and d coincide");

  DlcUpdate out;
  out.target = smoothed_log_ratio(alpha, eps_log);
  const double b = out.target / k - dot(a, h);
  out.delta = scaled(a, b / a_sq);
  out.updated.assign(h.begin(), h.end());
  axpy(1.0, out.delta, out.updated);
  return out;
}

StepAudit steer_step(std::span<double> state, std::span<const double> u, std::span<const double> d,
                     const PreferenceVector& alpha, double k, double eps_log) {
  StepAudit audit;
  audit.pre_gap = k * (dot(u, state) - dot(d, state));
  const DlcUpdate upd = dlc_update(state, u, d, alpha, k, eps_log);
  std::copy(upd.updated.begin(), upd.updated.end(), state.begin());
  audit.delta_norm = norm2(upd.delta);
  audit.post_gap = k * (dot(u, state) - dot(d, state));
  return audit;
}

std::string_view pipeline_mode_name(PipelineMode mode) {
  return mode == PipelineMode::Direct ? "direct" : "polarize_then_calibrate";
}

PipelineMode parse_pipeline_mode(std::string_view name) {
  if (name == "direct") return PipelineMode::Direct;
  if (name == "polarize_then_calibrate") return PipelineMode::PolarizeThenCalibrate;
  throw std::invalid_argument("unknown pipeline mode: " + std::string(name));
}

void SteeringConfig::validate() const {
  if (!(k > 0.0)) throw std::invalid_argument("SteeringConfig: k must be > 0");
  if (!(eps_log > 0.0)) throw std::invalid_argument("SteeringConfig: eps_log must be > 0");
  if (top_k < 0) throw std::invalid_argument("SteeringConfig: top_k must be >= 0");
  if (single_layer && *single_layer < 0) throw std::invalid_argument("SteeringConfig: negative layer");
}

int default_top_k(const HeadScoreMap& scores) {
  std::vector<HeadKey> all = scores.selected[0];
  all.insert(all.end(), scores.selected[1].begin(), scores.selected[1].end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  return std::clamp(static_cast<int>(all.size()), 1, 24);
}

std::vector<HeadDirection> select_top_k_heads(const HeadScoreMap& scores, std::span<const Vector> probe_u,
                                              std::span<const Vector> probe_d, int k) {
  const auto total = static_cast<std::size_t>(scores.n_layers * scores.n_heads);
  if (probe_u.size() != total || probe_d.size() != total)
    throw std::invalid_argument("select_top_k_heads: probe weights do not cover every head");
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  auto mean_score = [&](std::size_t i) { return 0.5 * (scores.scores[0][i] + scores.scores[1][i]); };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mean_score(a) > mean_score(b); });

  std::vector<HeadDirection> out;
  for (std::size_t i = 0; i < std::min(total, static_cast<std::size_t>(std::max(k, 0))); ++i) {
    const std::size_t idx = order[i];
    const double nu = norm2(probe_u[idx]);
    const double nd = norm2(probe_d[idx]);
    if (!(nu > 0.0) || !(nd > 0.0)) throw std::runtime_error("select_top_k_heads: zero probe weight vector");
    out.push_back(HeadDirection{static_cast<int>(idx) / scores.n_heads, static_cast<int>(idx) % scores.n_heads,
                                scaled(probe_u[idx], 1.0 / nu), scaled(probe_d[idx], 1.0 / nd), mean_score(idx)});
  }
  std::sort(out.begin(), out.end(),
            [](const HeadDirection& a, const HeadDirection& b) { return std::tie(a.layer, a.head) < std::tie(b.layer, b.head); });
  return out;
}

std::vector<Intervention> steering_interventions(std::span<const DirectionPair> pairs,
                                                 std::span<const HeadDirection> heads, const PreferenceVector& alpha,
                                                 const SteeringConfig& config) {
  config.validate();
  std::vector<Intervention> out;
  if (config.site == SteeringSite::HeadOutput) {
    for (const HeadDirection& hd : heads) {
      if (config.single_layer && hd.layer != *config.single_layer) continue;
      out.emplace_back(DlcEdit{hd.layer, config.site, hd.head, hd.u, hd.d, alpha.u(), config.k, config.eps_log});
    }
    if (config.single_layer && out.empty())
      throw std::invalid_argument("steering: no top-K head at layer " + std::to_string(*config.single_layer));
    return out;
  }
  auto emit = [&](const DirectionPair& p) {
    out.emplace_back(DlcEdit{p.layer, config.site, -1, p.u, p.d, alpha.u(), config.k, config.eps_log});
  };
  if (config.single_layer) {
    const auto it = std::find_if(pairs.begin(), pairs.end(),
                                 [&](const DirectionPair& p) { return p.layer == *config.single_layer; });
    if (it == pairs.end())
      throw std::invalid_argument("steering: missing direction pair for layer " + std::to_string(*config.single_layer));
    emit(*it);
  } else {
    for (const DirectionPair& p : pairs) emit(p);
  }
  return out;
}

FineGrainedRun run_fine_grained(const Model& model, std::span<const Prompt> prompts, std::span<const double> alpha_grid,
                                std::span<const DirectionPair> pairs, std::span<const HeadDirection> heads,
                                const BranchPointSet& branch, const SteeringConfig& config,
                                const GenerationOptions& options) {
  FineGrainedRun run;
  for (double alpha_u : alpha_grid) {
    const PreferenceVector alpha = PreferenceVector::from_u(alpha_u);
    std::vector<Intervention> interventions;
    if (config.mode == PipelineMode::PolarizeThenCalibrate) {
      const BinaryPreference pref =
          alpha.u() > 0.5 ? BinaryPreference::utilitarian() : BinaryPreference::deontological();
      interventions = gating_interventions(branch, pref);
    }
    auto steering = steering_interventions(pairs, heads, alpha, config);
    std::move(steering.begin(), steering.end(), std::back_inserter(interventions));
    run.points.push_back(FineGrainedPoint{alpha_u, run_batch(model, prompts, interventions, options)});
  }
  return run;
}

void write_audit_csv(std::ostream& out, std::span<const AuditEntry> entries) {
  out << "prompt_id,alpha_u,site,layer,head,step,delta_norm,pre_gap,post_gap,post_softmax_u\n";
  for (const AuditEntry& e : entries) {
    out << e.prompt_id << ',' << csv::number(e.alpha_u) << ',' << steering_site_name(e.site) << ',' << e.layer << ',';
    if (e.head >= 0) out << e.head + 1;
    out << ',' << e.step << ',' << csv::number(e.delta_norm) << ',' << csv::number(e.pre_gap) << ','
        << csv::number(e.post_gap) << ',' << csv::number(softmax_u_from_gap(e.post_gap)) << '\n';
  }
}

}  // namespace cdrsteer
