#pragma once

// Branch-point detection and binary-control gating.

#include <iosfwd>
#include <map>
#include <span>
#include <vector>

#include "cdrsteer/ffn_align.hpp"
#include "cdrsteer/linalg.hpp"
#include "cdrsteer/probing.hpp"
#include "cdrsteer/toymodel.hpp"

namespace cdrsteer {

struct BranchPoint {
  int layer = 0;
  std::vector<int> shared_heads;  // S_l, 0-based
  double jaccard = 1.0;           // J_l
  std::vector<int> u_only;        // C_l(U) \ C_l(D), 0-based
  std::vector<int> d_only;        // C_l(D) \ C_l(U), 0-based

  bool operator==(const BranchPoint&) const = default;
};

struct BranchPointSet {
  std::vector<BranchPoint> points;  // ascending layer

  const BranchPoint* find(int layer) const;
  std::vector<int> layers() const;
  bool empty() const { return points.empty(); }
};

// |A ∩ B| / |A ∪ B|, with J(∅, ∅) = 1.
double jaccard(std::span<const int> a, std::span<const int> b);

// Per-layer head and unit sets for both frameworks.
struct LayerSets {
  std::vector<int> heads_u, heads_d;
  std::vector<int> units_u, units_d;
};

BranchPointSet detect_branch_points(std::span<const LayerSets> layers, double tau);
BranchPointSet detect_branch_points(const HeadScoreMap& heads, const FFNSelection& ffn_u, const FFNSelection& ffn_d,
                                    double tau);

// Δ = ((m - 1) ⊙ z) W_o, m zeroing the d_h blocks of `shared_heads`.
Vector masking_deviation(std::span<const double> z, std::span<const int> shared_heads, const Matrix& w_o, int d_head);

// Spliced activation m with m[units] <- m̃[units].
Vector gated_activation(std::span<const double> x, std::span<const double> delta, std::span<const int> units,
                        const LayerWeights& weights);

// m = φ(x W_gate) ⊙ (x W_up); m[units] <- m̃[units] with x̃ = x + Δ; returns m W_down.
Vector gated_ffn(std::span<const double> x, std::span<const double> delta, std::span<const int> units,
                 const LayerWeights& weights);

// α_U, α_D ∈ {0, 1}, exactly one set.
class BinaryPreference {
 public:
  static BinaryPreference utilitarian() { return BinaryPreference(true); }
  static BinaryPreference deontological() { return BinaryPreference(false); }
  static BinaryPreference from_weights(double alpha_u, double alpha_d);

  double alpha_u() const { return utilitarian_ ? 1.0 : 0.0; }
  double alpha_d() const { return utilitarian_ ? 0.0 : 1.0; }
  bool is_utilitarian() const { return utilitarian_; }

 private:
  explicit BinaryPreference(bool utilitarian) : utilitarian_(utilitarian) {}
  bool utilitarian_;
};

// One FfnGate per branch layer: α_U = 1 overwrites D-only units, α_D = 1 U-only.
std::vector<Intervention> gating_interventions(const BranchPointSet& branch, BinaryPreference preference);

struct GenerationOptions {
  int max_steps = 4;
  HookSet hooks{HookKind::ResidualPostFfn};
};

// Generates every prompt under binary control (prompt-parallel).
std::vector<GenerationResult> run_binary_control(const Model& model, std::span<const Prompt> prompts,
                                                 BinaryPreference preference, const BranchPointSet& branch,
                                                 const GenerationOptions& options = {});

// Generates every prompt with a fixed intervention list (prompt-parallel).
std::vector<GenerationResult> run_batch(const Model& model, std::span<const Prompt> prompts,
                                        std::span<const Intervention> interventions, const GenerationOptions& options);

// Per layer: one row per prompt, the mean over generated steps of the
// recorded `kind` vectors. Rows follow `prompt_ids` order.
std::map<int, Matrix> record_residuals(std::span<const HookRecord> records, std::span<const int> prompt_ids,
                                       std::span<const int> layers, HookKind kind = HookKind::ResidualPostFfn);

struct ResidualPair {
  std::map<int, Matrix> utilitarian;
  std::map<int, Matrix> deontological;
};

// Both binary settings must cover the same prompt set.
ResidualPair record_residual_pair(std::span<const HookRecord> utilitarian, std::span<const HookRecord> deontological,
                                  std::span<const int> layers, HookKind kind = HookKind::ResidualPostFfn);

// JSON array of {layer, shared_heads[], jaccard, u_only[], d_only[]} with
// 1-based heads and units.
void write_branch_points_json(std::ostream& out, const BranchPointSet& set);
BranchPointSet read_branch_points_json(std::istream& in);

}  // namespace cdrsteer
