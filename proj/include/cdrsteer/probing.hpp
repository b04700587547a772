#pragma once

// Ridge probes on attention-head outputs with K-fold Spearman scoring.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "cdrsteer/linalg.hpp"
#include "cdrsteer/toymodel.hpp"

namespace cdrsteer {

// w = (XᵀX + λI)⁻¹ Xᵀ y, no intercept.
Vector ridge_fit(const Matrix& x, std::span<const double> y, double lambda);

struct RankCorrelation {
  double rho = 0.0;
  bool degenerate = false;  // one side had zero rank variance; rho is 0
};

// Fractional (average) ranks, 1-based.
Vector fractional_ranks(std::span<const double> values);

RankCorrelation spearman(std::span<const double> y, std::span<const double> y_hat);

struct ProbeOptions {
  double lambda = 1.0;
  int folds = 2;
  std::uint64_t seed = 42;
};

// Shuffled K-fold partition; fold k holds the k-th contiguous chunk of a
// seeded permutation of 0..n-1.
std::vector<std::vector<std::size_t>> fold_partition(std::size_t n, int folds, std::uint64_t seed);

// Mean held-out Spearman of a ridge probe.
double cross_validated_score(const Matrix& features, std::span<const double> labels, const ProbeOptions& options);

// Per-head features for one framework: features[l * H + h] is N × d_h.
struct HeadFeatureSet {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<int> prompt_ids;
  std::vector<Matrix> features;
  Vector labels;

  const Matrix& at(int layer, int head) const { return features[static_cast<std::size_t>(layer * n_heads + head)]; }
};

// Builds a probe dataset from final-token head outputs of each prompt.
HeadFeatureSet collect_head_features(const Model& model, std::span<const Prompt> prompts, Framework framework);

struct HeadKey {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadKey&) const = default;
};

struct HeadScoreMap {
  int n_layers = 0;
  int n_heads = 0;
  std::array<Vector, 2> scores;                  // [framework][l * H + h]
  std::array<std::vector<HeadKey>, 2> selected;  // sorted
  std::array<std::vector<bool>, 2> flagged;      // a fold had a degenerate ρ

  double score(Framework f, int layer, int head) const {
    return scores[framework_index(f)][static_cast<std::size_t>(layer * n_heads + head)];
  }
  bool is_selected(Framework f, int layer, int head) const;
  // A_l(e)
  std::vector<int> heads_at(Framework f, int layer) const;
};

struct HeadThresholds {
  double utilitarian = 0.4;
  double deontological = 0.4;
  double of(Framework f) const { return f == Framework::Utilitarian ? utilitarian : deontological; }
};

HeadScoreMap probe_heads(const HeadFeatureSet& utilitarian, const HeadFeatureSet& deontological,
                         const ProbeOptions& options, const HeadThresholds& thresholds);

// Re-applies thresholds to existing scores.
void reselect(HeadScoreMap& map, const HeadThresholds& thresholds);

// Full-data ridge weights per head: result[l * H + h].
std::vector<Vector> fit_head_probes(const HeadFeatureSet& features, double lambda);

// JSON Lines rows {prompt_id, layer, head (1-based), values, label}.
void write_probe_jsonl(std::ostream& out, const HeadFeatureSet& set);
HeadFeatureSet read_probe_jsonl(std::istream& in);

// CSV: layer,head,framework,score,selected (head 1-based).
void write_head_scores_csv(std::ostream& out, const HeadScoreMap& map);
HeadScoreMap read_head_scores_csv(std::istream& in);

}  // namespace cdrsteer
