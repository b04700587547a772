#include "cdrsteer/cdr.hpp"

#include <algorithm>
#include <istream>
#include <iterator>
#include <ostream>
#include <set>
#include <stdexcept>

#include "cdrsteer/kernels.hpp"
#include "serialize.hpp"

namespace cdrsteer {

using nlohmann::json;

namespace {

std::vector<int> sorted_unique(std::span<const int> v) {
  std::vector<int> out(v.begin(), v.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

const BranchPoint* BranchPointSet::find(int layer) const {
  for (const BranchPoint& p : points)
    if (p.layer == layer) return &p;
  return nullptr;
}

std::vector<int> BranchPointSet::layers() const {
  std::vector<int> out;
  for (const BranchPoint& p : points) out.push_back(p.layer);
  return out;
}

double jaccard(std::span<const int> a, std::span<const int> b) {
  const auto sa = sorted_unique(a);
  const auto sb = sorted_unique(b);
  if (sa.empty() && sb.empty()) return 1.0;
  std::vector<int> inter;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  const std::size_t uni = sa.size() + sb.size() - inter.size();
  return static_cast<double>(inter.size()) / static_cast<double>(uni);
}

BranchPointSet detect_branch_points(std::span<const LayerSets> layers, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("detect_branch_points: tau must lie in (0, 1]");
  BranchPointSet out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerSets& s = layers[l];
    const auto hu = sorted_unique(s.heads_u);
    const auto hd = sorted_unique(s.heads_d);
    std::vector<int> shared;
    std::set_intersection(hu.begin(), hu.end(), hd.begin(), hd.end(), std::back_inserter(shared));
    if (shared.empty()) continue;
    const double j = jaccard(s.units_u, s.units_d);
    if (!(j < tau)) continue;
    const auto cu = sorted_unique(s.units_u);
    const auto cd = sorted_unique(s.units_d);
    BranchPoint p;
    p.layer = static_cast<int>(l);
    p.shared_heads = std::move(shared);
    p.jaccard = j;
    std::set_difference(cu.begin(), cu.end(), cd.begin(), cd.end(), std::back_inserter(p.u_only));
    std::set_difference(cd.begin(), cd.end(), cu.begin(), cu.end(), std::back_inserter(p.d_only));
    out.points.push_back(std::move(p));
  }
  return out;
}

BranchPointSet detect_branch_points(const HeadScoreMap& heads, const FFNSelection& ffn_u, const FFNSelection& ffn_d,
                                    double tau) {
  if (ffn_u.layers.size() != ffn_d.layers.size() || static_cast<int>(ffn_u.layers.size()) != heads.n_layers)
    throw std::invalid_argument("detect_branch_points: head and FFN selections cover different layer counts");
  std::vector<LayerSets> layers(ffn_u.layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const int li = static_cast<int>(l);
    layers[l].heads_u = heads.heads_at(Framework::Utilitarian, li);
    layers[l].heads_d = heads.heads_at(Framework::Deontological, li);
    layers[l].units_u = ffn_u.layers[l].selected;
    layers[l].units_d = ffn_d.layers[l].selected;
  }
  return detect_branch_points(layers, tau);
}

Vector masking_deviation(std::span<const double> z, std::span<const int> shared_heads, const Matrix& w_o, int d_head) {
  if (z.size() != w_o.rows()) throw std::invalid_argument("masking_deviation: z length must equal W_o rows");
  if (d_head < 1 || z.size() % static_cast<std::size_t>(d_head) != 0)
    throw std::invalid_argument("masking_deviation: d_head does not divide z");
  const int n_heads = static_cast<int>(z.size()) / d_head;
  // (m - 1) ⊙ z: -z on the masked blocks, 0 elsewhere.
  Vector masked(z.size(), 0.0);
  for (int h : sorted_unique(shared_heads)) {
    if (h < 0 || h >= n_heads) throw std::invalid_argument("masking_deviation: head out of range");
    const auto off = static_cast<std::size_t>(h * d_head);
    for (std::size_t c = 0; c < static_cast<std::size_t>(d_head); ++c) masked[off + c] = -z[off + c];
  }
  return kernels::serial::vecmat(masked, w_o);
}

Vector gated_activation(std::span<const double> x, std::span<const double> delta, std::span<const int> units,
                        const LayerWeights& weights) {
  if (delta.size() != x.size()) throw std::invalid_argument("gated_ffn: Δ length must equal x length");
  Vector m = ffn_activation(x, weights);
  if (units.empty()) return m;
  Vector shifted(x.begin(), x.end());
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += delta[i];
  const Vector m_tilde = ffn_activation(shifted, weights);
  for (int r : units) {
    if (r < 0 || static_cast<std::size_t>(r) >= m.size()) throw std::invalid_argument("gated_ffn: unit out of range");
    m[static_cast<std::size_t>(r)] = m_tilde[static_cast<std::size_t>(r)];
  }
  return m;
}

Vector gated_ffn(std::span<const double> x, std::span<const double> delta, std::span<const int> units,
                 const LayerWeights& weights) {
  return kernels::serial::vecmat(gated_activation(x, delta, units, weights), weights.w_down);
}

BinaryPreference BinaryPreference::from_weights(double alpha_u, double alpha_d) {
  if (alpha_u == 1.0 && alpha_d == 0.0) return utilitarian();
  if (alpha_u == 0.0 && alpha_d == 1.0) return deontological();
  throw std::invalid_argument("BinaryPreference: weights must be (1, 0) or (0, 1)");
}

std::vector<Intervention> gating_interventions(const BranchPointSet& branch, BinaryPreference preference) {
  std::vector<Intervention> out;
  for (const BranchPoint& p : branch.points)
    out.emplace_back(FfnGate{p.layer, p.shared_heads, preference.is_utilitarian() ? p.d_only : p.u_only});
  return out;
}

std::vector<GenerationResult> run_batch(const Model& model, std::span<const Prompt> prompts,
                                        std::span<const Intervention> interventions, const GenerationOptions& options) {
  validate_interventions(model, interventions);
  std::vector<GenerationResult> results(prompts.size());
  kernels::parallel_for(prompts.size(), [&](std::size_t i) {
    results[i] = generate(model, prompts[i].tokens, options.max_steps, options.hooks, interventions, prompts[i].id);
  });
  return results;
}

std::vector<GenerationResult> run_binary_control(const Model& model, std::span<const Prompt> prompts,
                                                 BinaryPreference preference, const BranchPointSet& branch,
                                                 const GenerationOptions& options) {
  const auto interventions = gating_interventions(branch, preference);
  return run_batch(model, prompts, interventions, options);
}

std::map<int, Matrix> record_residuals(std::span<const HookRecord> records, std::span<const int> prompt_ids,
                                       std::span<const int> layers, HookKind kind) {
  std::map<int, std::size_t> row_of;
  for (std::size_t i = 0; i < prompt_ids.size(); ++i)
    if (!row_of.emplace(prompt_ids[i], i).second) throw std::invalid_argument("record_residuals: duplicate prompt id");

  std::map<int, Matrix> sums;
  std::map<int, std::vector<int>> counts;
  for (int l : layers) counts[l].assign(prompt_ids.size(), 0);
  for (const HookRecord& r : records) {
    if (r.kind != kind) continue;
    auto cit = counts.find(r.layer);
    if (cit == counts.end()) continue;
    auto rit = row_of.find(r.prompt_id);
    if (rit == row_of.end()) continue;
    Matrix& m = sums[r.layer];
    if (m.empty()) m = Matrix(prompt_ids.size(), r.values.size());
    if (r.values.size() != m.cols()) throw std::invalid_argument("record_residuals: inconsistent vector length");
    auto row = m.row(rit->second);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += r.values[c];
    ++cit->second[rit->second];
  }
  std::map<int, Matrix> out;
  for (int l : layers) {
    const auto& cnt = counts[l];
    for (std::size_t i = 0; i < cnt.size(); ++i)
      if (cnt[i] == 0)
        throw std::invalid_argument("record_residuals: prompt " + std::to_string(prompt_ids[i]) +
                                    " has no records at layer " + std::to_string(l));
    Matrix m = std::move(sums[l]);
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (double& v : m.row(i)) v /= cnt[i];
    out.emplace(l, std::move(m));
  }
  return out;
}

ResidualPair record_residual_pair(std::span<const HookRecord> utilitarian, std::span<const HookRecord> deontological,
                                  std::span<const int> layers, HookKind kind) {
  auto ids_of = [kind](std::span<const HookRecord> recs) {
    std::set<int> ids;
    for (const HookRecord& r : recs)
      if (r.kind == kind) ids.insert(r.prompt_id);
    return ids;
  };
  const auto ids_u = ids_of(utilitarian);
  const auto ids_d = ids_of(deontological);
  if (ids_u != ids_d) throw std::invalid_argument("record_residuals: the two binary settings cover different prompts");
  const std::vector<int> ids(ids_u.begin(), ids_u.end());
  return {record_residuals(utilitarian, ids, layers, kind), record_residuals(deontological, ids, layers, kind)};
}

namespace serialize {

namespace {
std::vector<int> one_based(const std::vector<int>& v) {
  std::vector<int> out(v);
  for (int& x : out) ++x;
  return out;
}
std::vector<int> zero_based(const json& j) {
  auto v = j.get<std::vector<int>>();
  for (int& x : v) {
    if (x < 1) throw std::runtime_error("branch points: indices are 1-based");
    --x;
  }
  return v;
}
}  // namespace

json branch_points(const BranchPointSet& set) {
  json arr = json::array();
  for (const BranchPoint& p : set.points) {
    arr.push_back({{"layer", p.layer},
                   {"shared_heads", one_based(p.shared_heads)},
                   {"jaccard", p.jaccard},
                   {"u_only", one_based(p.u_only)},
                   {"d_only", one_based(p.d_only)}});
  }
  return arr;
}

BranchPointSet branch_points(const json& j) {
  BranchPointSet set;
  for (const json& e : j) {
    BranchPoint p;
    p.layer = e.at("layer").get<int>();
    p.shared_heads = zero_based(e.at("shared_heads"));
    p.jaccard = e.at("jaccard").get<double>();
    p.u_only = zero_based(e.at("u_only"));
    p.d_only = zero_based(e.at("d_only"));
    set.points.push_back(std::move(p));
  }
  std::sort(set.points.begin(), set.points.end(),
            [](const BranchPoint& a, const BranchPoint& b) { return a.layer < b.layer; });
  return set;
}

}  // namespace serialize

void write_branch_points_json(std::ostream& out, const BranchPointSet& set) {
  out << serialize::branch_points(set).dump(2) << '\n';
}

BranchPointSet read_branch_points_json(std::istream& in) {
  return serialize::branch_points(json::parse(in));
}

}  // namespace cdrsteer
