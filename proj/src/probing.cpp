#include "cdrsteer/probing.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "cdrsteer/kernels.hpp"
#include "cdrsteer/rng.hpp"
#include "csv.hpp"
#include "json.hpp"

namespace cdrsteer {

using nlohmann::json;

Vector ridge_fit(const Matrix& x, std::span<const double> y, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("ridge_fit: lambda must be > 0");
  if (x.rows() == 0) throw std::invalid_argument("ridge_fit: no samples");
  if (x.rows() != y.size()) throw std::invalid_argument("ridge_fit: feature rows and labels differ in count");
  for (double v : x.data())
    if (!std::isfinite(v)) throw std::invalid_argument("ridge_fit: non-finite feature");
  for (double v : y)
    if (!std::isfinite(v)) throw std::invalid_argument("ridge_fit: non-finite label");

  Matrix a = kernels::serial::gram(x);
  for (std::size_t i = 0; i < a.rows(); ++i) a(i, i) += lambda;
  Vector b(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) b[c] += x(r, c) * y[r];
  return solve_spd(a, b);
}

Vector fractional_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  Vector ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    // positions i..j (0-based) share the mean 1-based rank
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

RankCorrelation spearman(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) throw std::invalid_argument("spearman: length mismatch");
  if (y.size() < 2) throw std::invalid_argument("spearman: needs at least two samples");
  const Vector ry = fractional_ranks(y);
  const Vector rp = fractional_ranks(y_hat);
  const double n = static_cast<double>(y.size());
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  const double mp = std::accumulate(rp.begin(), rp.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < ry.size(); ++i) {
    sxy += (ry[i] - my) * (rp[i] - mp);
    sxx += (ry[i] - my) * (ry[i] - my);
    syy += (rp[i] - mp) * (rp[i] - mp);
  }
  if (sxx == 0.0 || syy == 0.0) return {0.0, true};
  const double rho = sxy / std::sqrt(sxx * syy);
  return {std::clamp(rho, -1.0, 1.0), false};
}

std::vector<std::vector<std::size_t>> fold_partition(std::size_t n, int folds, std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("fold_partition: need at least 2 folds");
  if (n < 2 * static_cast<std::size_t>(folds))
    throw std::invalid_argument("fold_partition: need at least 2 samples per fold");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(perm));

  const auto k = static_cast<std::size_t>(folds);
  std::vector<std::vector<std::size_t>> out(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    out[f].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                  perm.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
  }
  return out;
}

namespace {

struct CvOutcome {
  double score = 0.0;
  bool flagged = false;
};

CvOutcome cross_validate(const Matrix& features, std::span<const double> labels,
                         const std::vector<std::vector<std::size_t>>& partition, double lambda) {
  CvOutcome out;
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  for (std::size_t f = 0; f < partition.size(); ++f) {
    const auto& held = partition[f];
    std::vector<bool> is_held(n, false);
    for (std::size_t i : held) is_held[i] = true;

    Matrix train(n - held.size(), d);
    Vector train_y;
    train_y.reserve(train.rows());
    std::size_t r = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (is_held[i]) continue;
      std::copy(features.row(i).begin(), features.row(i).end(), train.row(r++).begin());
      train_y.push_back(labels[i]);
    }
    const Vector w = ridge_fit(train, train_y, lambda);

    Vector truth;
    Vector pred;
    for (std::size_t i : held) {
      truth.push_back(labels[i]);
      pred.push_back(dot(features.row(i), w));
    }
    const RankCorrelation rc = spearman(truth, pred);
    out.score += rc.rho;
    out.flagged = out.flagged || rc.degenerate;
  }
  out.score /= static_cast<double>(partition.size());
  return out;
}

}  // namespace

double cross_validated_score(const Matrix& features, std::span<const double> labels, const ProbeOptions& options) {
  if (features.rows() != labels.size()) throw std::invalid_argument("probe: feature rows and labels differ in count");
  const auto partition = fold_partition(features.rows(), options.folds, options.seed);
  return cross_validate(features, labels, partition, options.lambda).score;
}

HeadFeatureSet collect_head_features(const Model& model, std::span<const Prompt> prompts, Framework framework) {
  const ModelConfig& cfg = model.config;
  HeadFeatureSet set;
  set.n_layers = cfg.n_layers;
  set.n_heads = cfg.n_heads;
  const auto n = prompts.size();
  const auto dh = static_cast<std::size_t>(cfg.d_head());
  set.features.assign(static_cast<std::size_t>(cfg.n_layers * cfg.n_heads), Matrix(n, dh));
  for (const Prompt& p : prompts) {
    set.prompt_ids.push_back(p.id);
    set.labels.push_back(framework == Framework::Utilitarian ? p.label_u : p.label_d);
  }
  const HookSet hooks{HookKind::HeadOut};
  kernels::parallel_for(n, [&](std::size_t i) {
    const ForwardResult fr = forward(model, prompts[i].tokens, hooks, {}, StepContext{prompts[i].id, 0});
    for (const HookRecord& r : fr.trace) {
      Matrix& m = set.features[static_cast<std::size_t>(r.layer * cfg.n_heads + *r.head)];
      std::copy(r.values.begin(), r.values.end(), m.row(i).begin());
    }
  });
  return set;
}

bool HeadScoreMap::is_selected(Framework f, int layer, int head) const {
  const auto& sel = selected[framework_index(f)];
  return std::binary_search(sel.begin(), sel.end(), HeadKey{layer, head});
}

std::vector<int> HeadScoreMap::heads_at(Framework f, int layer) const {
  std::vector<int> out;
  for (const HeadKey& k : selected[framework_index(f)])
    if (k.layer == layer) out.push_back(k.head);
  return out;
}

void reselect(HeadScoreMap& map, const HeadThresholds& thresholds) {
  for (Framework f : kFrameworks) {
    const int fi = framework_index(f);
    auto& sel = map.selected[fi];
    sel.clear();
    for (int l = 0; l < map.n_layers; ++l)
      for (int h = 0; h < map.n_heads; ++h)
        if (map.score(f, l, h) > thresholds.of(f)) sel.push_back(HeadKey{l, h});
  }
}

HeadScoreMap probe_heads(const HeadFeatureSet& utilitarian, const HeadFeatureSet& deontological,
                         const ProbeOptions& options, const HeadThresholds& thresholds) {
  if (utilitarian.n_layers != deontological.n_layers || utilitarian.n_heads != deontological.n_heads)
    throw std::invalid_argument("probe_heads: framework datasets disagree on model shape");
  HeadScoreMap map;
  map.n_layers = utilitarian.n_layers;
  map.n_heads = utilitarian.n_heads;
  const auto n_heads_total = static_cast<std::size_t>(map.n_layers * map.n_heads);

  for (Framework f : kFrameworks) {
    const HeadFeatureSet& set = f == Framework::Utilitarian ? utilitarian : deontological;
    if (set.features.size() != n_heads_total) throw std::invalid_argument("probe_heads: missing head features");
    for (const Matrix& m : set.features)
      if (m.rows() != set.labels.size()) throw std::invalid_argument("probe_heads: feature rows and labels differ");
    // One partition shared by every head of this framework.
    const auto partition = fold_partition(set.labels.size(), options.folds, options.seed);
    const int fi = framework_index(f);
    map.scores[fi].assign(n_heads_total, 0.0);
    std::vector<char> flags(n_heads_total, 0);
    kernels::parallel_for(n_heads_total, [&](std::size_t idx) {
      const CvOutcome cv = cross_validate(set.features[idx], set.labels, partition, options.lambda);
      map.scores[fi][idx] = cv.score;
      flags[idx] = cv.flagged ? 1 : 0;
    });
    map.flagged[fi].assign(flags.begin(), flags.end());
  }
  reselect(map, thresholds);
  return map;
}

std::vector<Vector> fit_head_probes(const HeadFeatureSet& features, double lambda) {
  std::vector<Vector> weights(features.features.size());
  kernels::parallel_for(weights.size(),
                        [&](std::size_t i) { weights[i] = ridge_fit(features.features[i], features.labels, lambda); });
  return weights;
}

void write_probe_jsonl(std::ostream& out, const HeadFeatureSet& set) {
  for (std::size_t i = 0; i < set.prompt_ids.size(); ++i) {
    for (int l = 0; l < set.n_layers; ++l) {
      for (int h = 0; h < set.n_heads; ++h) {
        const auto row = set.at(l, h).row(i);
        json j;
        j["prompt_id"] = set.prompt_ids[i];
        j["layer"] = l;
        j["head"] = h + 1;
        j["values"] = Vector(row.begin(), row.end());
        j["label"] = set.labels[i];
        out << j.dump() << '\n';
      }
    }
  }
}

HeadFeatureSet read_probe_jsonl(std::istream& in) {
  struct Row {
    int layer;
    int head;
    Vector values;
  };
  std::vector<int> order;
  std::map<int, std::vector<Row>> by_prompt;
  std::map<int, double> labels;
  int n_layers = 0;
  int n_heads = 0;
  std::size_t dh = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      if (j.contains("schema_version")) continue;
      const int pid = j.at("prompt_id").get<int>();
      Row r{j.at("layer").get<int>(), j.at("head").get<int>() - 1, j.at("values").get<Vector>()};
      if (r.layer < 0 || r.head < 0) throw std::runtime_error("negative layer or head");
      if (dh == 0) dh = r.values.size();
      if (r.values.size() != dh) throw std::runtime_error("inconsistent feature length");
      const double label = j.at("label").get<double>();
      if (by_prompt.find(pid) == by_prompt.end()) {
        order.push_back(pid);
        labels[pid] = label;
      } else if (labels[pid] != label) {
        throw std::runtime_error("prompt " + std::to_string(pid) + " has conflicting labels");
      }
      n_layers = std::max(n_layers, r.layer + 1);
      n_heads = std::max(n_heads, r.head + 1);
      by_prompt[pid].push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error("probe dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }

  HeadFeatureSet set;
  set.n_layers = n_layers;
  set.n_heads = n_heads;
  set.features.assign(static_cast<std::size_t>(n_layers * n_heads), Matrix(order.size(), dh));
  std::vector<std::vector<bool>> seen(order.size(), std::vector<bool>(set.features.size(), false));
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int pid = order[i];
    set.prompt_ids.push_back(pid);
    set.labels.push_back(labels[pid]);
    for (const Row& r : by_prompt[pid]) {
      const auto idx = static_cast<std::size_t>(r.layer * n_heads + r.head);
      seen[i][idx] = true;
      std::copy(r.values.begin(), r.values.end(), set.features[idx].row(i).begin());
    }
    if (std::find(seen[i].begin(), seen[i].end(), false) != seen[i].end())
      throw std::runtime_error("probe dataset: prompt " + std::to_string(pid) + " is missing heads");
  }
  return set;
}

void write_head_scores_csv(std::ostream& out, const HeadScoreMap& map) {
  out << "layer,head,framework,score,selected\n";
  for (Framework f : kFrameworks)
    for (int l = 0; l < map.n_layers; ++l)
      for (int h = 0; h < map.n_heads; ++h)
        out << l << ',' << h + 1 << ',' << framework_code(f) << ',' << csv::number(map.score(f, l, h)) << ','
            << (map.is_selected(f, l, h) ? 1 : 0) << '\n';
}

HeadScoreMap read_head_scores_csv(std::istream& in) {
  const csv::Table table = csv::read(in, {"layer", "head", "framework", "score", "selected"});
  struct Entry {
    Framework f;
    int layer;
    int head;
    double score;
    bool selected;
  };
  std::vector<Entry> entries;
  HeadScoreMap map;
  for (const auto& row : table.rows) {
    Entry e{parse_framework(row[2]), std::stoi(row[0]), std::stoi(row[1]) - 1, std::stod(row[3]), row[4] == "1"};
    if (e.layer < 0 || e.head < 0) throw std::runtime_error("head score csv: negative index");
    map.n_layers = std::max(map.n_layers, e.layer + 1);
    map.n_heads = std::max(map.n_heads, e.head + 1);
    entries.push_back(e);
  }
  for (int fi = 0; fi < 2; ++fi) {
    map.scores[fi].assign(static_cast<std::size_t>(map.n_layers * map.n_heads), 0.0);
    map.flagged[fi].assign(map.scores[fi].size(), false);
  }
  for (const Entry& e : entries) {
    const int fi = framework_index(e.f);
    map.scores[fi][static_cast<std::size_t>(e.layer * map.n_heads + e.head)] = e.score;
    if (e.selected) map.selected[fi].push_back(HeadKey{e.layer, e.head});
  }
  for (auto& sel : map.selected) std::sort(sel.begin(), sel.end());
  return map;
}

}  // namespace cdrsteer
