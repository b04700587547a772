#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "cdrsteer/linalg.hpp"
#include "cdrsteer/toymodel.hpp"

namespace cdrsteer {

enum class StdConvention { Population, Sample };

struct LayerAlignment {
  Vector scores;  // s[r] = W_up[:, r] · v_e
  double mean = 0.0;
  double stddev = 0.0;
  double threshold = 0.0;
  std::vector<int> selected;  // 0-based unit indices with s >= threshold
};

struct FFNSelection {
  Framework framework = Framework::Utilitarian;
  double gamma = 0.5;
  std::vector<LayerAlignment> layers;
};

// Column `token` of W_out.
Vector target_direction(const Model& model, int token);

LayerAlignment threshold_scores(std::span<const double> scores, double gamma,
                                StdConvention convention = StdConvention::Population);

FFNSelection score_and_select(const Model& model, std::span<const double> direction, double gamma, Framework framework,
                              StdConvention convention = StdConvention::Population);

// CSV: layer,framework,r,score,selected (r 1-based).
void write_ffn_selection_csv(std::ostream& out, std::span<const FFNSelection> selections);
std::vector<FFNSelection> read_ffn_selection_csv(std::istream& in);

}  // namespace cdrsteer
