#include "cdrsteer/ffn_align.hpp"

#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>

#include "csv.hpp"

namespace cdrsteer {

Vector target_direction(const Model& model, int token) {
  if (token < 0 || token >= model.config.vocab)
    throw std::out_of_range("target_direction: token id out of range: " + std::to_string(token));
  return model.w_out.column(static_cast<std::size_t>(token));
}

LayerAlignment threshold_scores(std::span<const double> scores, double gamma, StdConvention convention) {
  if (scores.empty()) throw std::invalid_argument("threshold_scores: no scores");
  LayerAlignment out;
  out.scores.assign(scores.begin(), scores.end());
  const double n = static_cast<double>(scores.size());
  double sum = 0.0;
  for (double s : scores) sum += s;
  out.mean = sum / n;
  double ss = 0.0;
  for (double s : scores) ss += (s - out.mean) * (s - out.mean);
  const double denom = convention == StdConvention::Population ? n : std::max(n - 1.0, 1.0);
  out.stddev = std::sqrt(ss / denom);
  out.threshold = out.mean + gamma * out.stddev;
  for (std::size_t r = 0; r < scores.size(); ++r)
    if (scores[r] >= out.threshold) out.selected.push_back(static_cast<int>(r));
  return out;
}

FFNSelection score_and_select(const Model& model, std::span<const double> direction, double gamma, Framework framework,
                              StdConvention convention) {
  if (direction.size() != static_cast<std::size_t>(model.config.d_model))
    throw std::invalid_argument("score_and_select: direction length must equal d_model");
  FFNSelection sel;
  sel.framework = framework;
  sel.gamma = gamma;
  for (const LayerWeights& w : model.layers) {
    Vector scores(w.w_up.cols(), 0.0);
    for (std::size_t r = 0; r < w.w_up.cols(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < w.w_up.rows(); ++c) s += w.w_up(c, r) * direction[c];
      scores[r] = s;
    }
    sel.layers.push_back(threshold_scores(scores, gamma, convention));
  }
  return sel;
}

void write_ffn_selection_csv(std::ostream& out, std::span<const FFNSelection> selections) {
  out << "layer,framework,r,score,selected\n";
  for (const FFNSelection& sel : selections) {
    for (std::size_t l = 0; l < sel.layers.size(); ++l) {
      const LayerAlignment& la = sel.layers[l];
      std::vector<bool> chosen(la.scores.size(), false);
      for (int r : la.selected) chosen[static_cast<std::size_t>(r)] = true;
      for (std::size_t r = 0; r < la.scores.size(); ++r)
        out << l << ',' << framework_code(sel.framework) << ',' << r + 1 << ',' << csv::number(la.scores[r]) << ','
            << (chosen[r] ? 1 : 0) << '\n';
    }
  }
}

std::vector<FFNSelection> read_ffn_selection_csv(std::istream& in) {
  const csv::Table table = csv::read(in, {"layer", "framework", "r", "score", "selected"});
  // framework -> layer -> (r -> (score, selected))
  std::map<int, std::map<int, std::map<int, std::pair<double, bool>>>> grouped;
  for (const auto& row : table.rows) {
    const int f = framework_index(parse_framework(row[1]));
    const int layer = std::stoi(row[0]);
    const int r = std::stoi(row[2]) - 1;
    if (layer < 0 || r < 0) throw std::runtime_error("ffn selection csv: negative index");
    grouped[f][layer][r] = {std::stod(row[3]), row[4] == "1"};
  }
  std::vector<FFNSelection> out;
  for (const auto& [fi, layers] : grouped) {
    FFNSelection sel;
    sel.framework = kFrameworks[static_cast<std::size_t>(fi)];
    int expected_layer = 0;
    for (const auto& [layer, units] : layers) {
      if (layer != expected_layer++) throw std::runtime_error("ffn selection csv: missing layer");
      Vector scores;
      std::vector<int> selected;
      int expected_r = 0;
      for (const auto& [r, entry] : units) {
        if (r != expected_r++) throw std::runtime_error("ffn selection csv: missing unit");
        scores.push_back(entry.first);
        if (entry.second) selected.push_back(r);
      }
      LayerAlignment la = threshold_scores(scores, 0.0);
      la.selected = std::move(selected);
      la.threshold = std::numeric_limits<double>::quiet_NaN();  // γ is not stored in the file
      sel.layers.push_back(std::move(la));
    }
    out.push_back(std::move(sel));
  }
  return out;
}

}  // namespace cdrsteer
