#include "cdrsteer/toymodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>

#include "cdrsteer/cdr.hpp"
#include "cdrsteer/dlc.hpp"
#include "cdrsteer/kernels.hpp"
#include "cdrsteer/rng.hpp"
#include "json.hpp"

namespace cdrsteer {

using nlohmann::json;

std::string_view framework_code(Framework f) { return f == Framework::Utilitarian ? "U" : "D"; }

Framework parse_framework(std::string_view code) {
  if (code == "U") return Framework::Utilitarian;
  if (code == "D") return Framework::Deontological;
  throw std::invalid_argument("unknown framework code: " + std::string(code));
}

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab < 1)
    throw std::invalid_argument("ModelConfig: all counts must be >= 1");
  if (d_model % n_heads != 0) throw std::invalid_argument("ModelConfig: d_model must be a multiple of n_heads");
}

PlantChannels plant_channels(const ModelConfig& config) {
  const int d = config.d_model;
  return PlantChannels{d - 4, d - 3, d - 2, d - 1, d - 4};
}

namespace {

void check_index_sets(const std::vector<std::vector<int>>& sets, int n_layers, int limit, const char* what) {
  if (static_cast<int>(sets.size()) > n_layers)
    throw std::invalid_argument(std::string("PlantSpec: more ") + what + " layers than the model has");
  for (const auto& layer : sets)
    for (int idx : layer)
      if (idx < 0 || idx >= limit) throw std::invalid_argument(std::string("PlantSpec: ") + what + " index out of range");
}

const std::vector<int>& layer_or_empty(const std::vector<std::vector<int>>& sets, int layer) {
  static const std::vector<int> empty;
  return layer < static_cast<int>(sets.size()) ? sets[static_cast<std::size_t>(layer)] : empty;
}

}  // namespace

void PlantSpec::validate(const ModelConfig& config) const {
  config.validate();
  if (config.d_model < 8) throw std::invalid_argument("PlantSpec: planting needs d_model >= 8");
  if (config.d_head() < 2) throw std::invalid_argument("PlantSpec: planting needs d_head >= 2");
  for (Framework f : kFrameworks) {
    const FrameworkPlant& p = of(f);
    check_index_sets(p.heads, config.n_layers, config.n_heads, "head");
    check_index_sets(p.ffn_units, config.n_layers, config.d_ff, "ffn unit");
    if (p.indicator_token < 0 || p.indicator_token >= config.vocab)
      throw std::invalid_argument("PlantSpec: indicator token out of range");
  }
  if (utilitarian.indicator_token == deontological.indicator_token)
    throw std::invalid_argument("PlantSpec: indicator tokens must differ");
  for (int t : anchor) {
    if (t < 0 || t >= config.vocab) throw std::invalid_argument("PlantSpec: anchor token out of range");
    if (t == utilitarian.indicator_token || t == deontological.indicator_token)
      throw std::invalid_argument("PlantSpec: anchor token collides with an indicator token");
  }
  if (scenario_length < 1) throw std::invalid_argument("PlantSpec: scenario_length must be >= 1");
  const std::set<int> reserved(anchor.begin(), anchor.end());
  if (static_cast<int>(reserved.size()) + 2 >= config.vocab)
    throw std::invalid_argument("PlantSpec: no scenario tokens left in the vocabulary");
}

PlantSpec PlantSpec::standard(const ModelConfig& config) {
  if (config.n_layers < 4 || config.n_heads < 4 || config.d_ff < 40 || config.vocab < 8)
    throw std::invalid_argument("PlantSpec::standard needs >= 4 layers, >= 4 heads, d_ff >= 40, vocab >= 8");
  PlantSpec p;
  const auto L = static_cast<std::size_t>(config.n_layers);
  p.utilitarian.heads.assign(L, {});
  p.deontological.heads.assign(L, {});
  p.utilitarian.ffn_units.assign(L, {});
  p.deontological.ffn_units.assign(L, {});

  p.utilitarian.heads[0] = {0};
  p.deontological.heads[0] = {1};
  p.utilitarian.ffn_units[0] = {0, 1, 2, 3};
  p.deontological.ffn_units[0] = {4, 5, 6, 7};

  p.utilitarian.heads[1] = {1, 2};
  p.deontological.heads[1] = {2, 3};
  p.utilitarian.ffn_units[1] = {8, 9, 10, 11, 12, 13};
  p.deontological.ffn_units[1] = {12, 13, 14, 15, 16, 17};

  p.utilitarian.heads[2] = {1};
  p.deontological.heads[2] = {1};
  p.utilitarian.ffn_units[2] = {20, 21, 22};
  p.deontological.ffn_units[2] = {20, 21, 22};

  p.utilitarian.heads[3] = {0, 3};
  p.deontological.heads[3] = {3};
  p.utilitarian.ffn_units[3] = {30, 31, 32, 33};
  p.deontological.ffn_units[3] = {34, 35, 36};

  p.utilitarian.indicator_token = config.vocab - 2;
  p.deontological.indicator_token = config.vocab - 1;
  p.anchor = {config.vocab - 4, config.vocab - 3};
  return p;
}

namespace {

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = stddev * rng.normal();
  return m;
}

// Projects the centered scenario-token labels out of every free embedding
// column, so no linear read of free channels tracks the labels.
void decorrelate_free_channels(Model& model, std::size_t nfree, const std::set<int>& anchor, int tok_u, int tok_d) {
  std::vector<std::size_t> tokens;
  for (int t = 0; t < model.config.vocab; ++t)
    if (anchor.count(t) == 0 && t != tok_u && t != tok_d) tokens.push_back(static_cast<std::size_t>(t));
  if (tokens.size() < 3) return;

  std::vector<Vector> basis;
  for (const Vector* labels : {&model.token_label_u, &model.token_label_d}) {
    Vector q(tokens.size());
    double mean = 0.0;
    for (std::size_t i = 0; i < tokens.size(); ++i) mean += (*labels)[tokens[i]];
    mean /= static_cast<double>(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) q[i] = (*labels)[tokens[i]] - mean;
    for (const Vector& b : basis) axpy(-dot(b, q), b, q);
    const double n = norm2(q);
    if (n > 1e-12) basis.push_back(scaled(q, 1.0 / n));
  }
  for (std::size_t c = 0; c < nfree; ++c) {
    Vector col(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) col[i] = model.embedding(tokens[i], c);
    for (const Vector& b : basis) axpy(-dot(b, col), b, col);
    for (std::size_t i = 0; i < tokens.size(); ++i) model.embedding(tokens[i], c) = col[i];
  }
}

void apply_plant(Model& model, const PlantSpec& plant) {
  const ModelConfig& cfg = model.config;
  const PlantChannels ch = plant_channels(cfg);
  const auto nfree = static_cast<std::size_t>(ch.n_free);
  const auto dm = static_cast<std::size_t>(cfg.d_model);
  const int dh = cfg.d_head();
  // Separate stream so the base weights match the unplanted model.
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  auto zero_rows = [&](Matrix& m) {
    for (std::size_t r = nfree; r < m.rows(); ++r) std::fill(m.row(r).begin(), m.row(r).end(), 0.0);
  };
  auto zero_cols = [&](Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = nfree; c < m.cols(); ++c) m(r, c) = 0.0;
  };
  for (LayerWeights& w : model.layers) {
    zero_rows(w.w_q);
    zero_rows(w.w_k);
    zero_rows(w.w_v);
    zero_rows(w.w_gate);
    zero_rows(w.w_up);
    zero_cols(w.w_o);
    zero_cols(w.w_down);
  }
  zero_rows(model.w_out);

  // Embeddings: free part rescaled to norm sqrt(n_free), labels on reserved.
  const std::set<int> anchor(plant.anchor.begin(), plant.anchor.end());
  const int tok_u = plant.utilitarian.indicator_token;
  const int tok_d = plant.deontological.indicator_token;
  for (int t = 0; t < cfg.vocab; ++t) {
    auto row = model.embedding.row(static_cast<std::size_t>(t));
    double ss = 0.0;
    for (std::size_t c = 0; c < nfree; ++c) ss += row[c] * row[c];
    const double scale = ss > 0.0 ? std::sqrt(static_cast<double>(nfree) / ss) : 0.0;
    for (std::size_t c = 0; c < nfree; ++c) row[c] *= scale;
    for (std::size_t c = nfree; c < dm; ++c) row[c] = 0.0;
    const double yu = rng.uniform();
    const double yd = rng.uniform();
    if (anchor.count(t) != 0) {
      row[static_cast<std::size_t>(ch.out_u)] = plant.anchor_gain;
      row[static_cast<std::size_t>(ch.out_d)] = plant.anchor_gain;
    } else if (t != tok_u && t != tok_d) {
      model.token_label_u[static_cast<std::size_t>(t)] = yu;
      model.token_label_d[static_cast<std::size_t>(t)] = yd;
      row[static_cast<std::size_t>(ch.label_u)] = plant.label_scale * yu;
      row[static_cast<std::size_t>(ch.label_d)] = plant.label_scale * yd;
    }
  }
  decorrelate_free_channels(model, nfree, anchor, tok_u, tok_d);

  // Indicator unembeddings live only on their out channel.
  for (Framework f : kFrameworks) {
    const auto tok = static_cast<std::size_t>(plant.of(f).indicator_token);
    for (std::size_t r = 0; r < dm; ++r) model.w_out(r, tok) = 0.0;
    model.w_out(static_cast<std::size_t>(ch.out(f)), tok) = plant.out_gain;
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerWeights& w = model.layers[static_cast<std::size_t>(l)];
    std::set<int> reset_heads;
    std::set<int> reset_units;
    for (Framework f : kFrameworks) {
      const int slot = framework_index(f);
      for (int h : layer_or_empty(plant.of(f).heads, l)) {
        const auto base = static_cast<std::size_t>(h * dh);
        if (reset_heads.insert(h).second) {
          for (std::size_t c = base; c < base + static_cast<std::size_t>(dh); ++c) {
            for (std::size_t r = 0; r < dm; ++r) {
              w.w_q(r, c) = 0.0;
              w.w_k(r, c) = 0.0;
              w.w_v(r, c) = r < nfree ? plant.noise * rng.normal() / std::sqrt(static_cast<double>(nfree)) : 0.0;
            }
            std::fill(w.w_o.row(c).begin(), w.w_o.row(c).end(), 0.0);
          }
        }
        const std::size_t col = base + static_cast<std::size_t>(slot);
        w.w_v(static_cast<std::size_t>(ch.label(f)), col) = plant.signal;
        w.w_o(col, static_cast<std::size_t>(ch.out(f))) = plant.head_gain;
      }
      const Vector v_e = model.w_out.column(static_cast<std::size_t>(plant.of(f).indicator_token));
      for (int r_unit : layer_or_empty(plant.of(f).ffn_units, l)) {
        const auto r = static_cast<std::size_t>(r_unit);
        if (reset_units.insert(r_unit).second) {
          for (std::size_t c = 0; c < dm; ++c) {
            w.w_up(c, r) = c < nfree ? plant.ffn_noise * rng.normal() : 0.0;
            w.w_gate(c, r) = c < nfree ? plant.ffn_noise * rng.normal() : 0.0;
          }
          std::fill(w.w_down.row(r).begin(), w.w_down.row(r).end(), 0.0);
        }
        for (std::size_t c = 0; c < dm; ++c) w.w_up(c, r) += plant.ffn_scale * v_e[c];
        w.w_gate(static_cast<std::size_t>(ch.out(f)), r) += plant.gate_gain;
        w.w_down(r, static_cast<std::size_t>(ch.out(f))) += plant.down_gain;
      }
    }
  }
}

}  // namespace

Model build_model(const ModelConfig& config, const std::optional<PlantSpec>& plant) {
  config.validate();
  if (plant) plant->validate(config);

  const auto dm = static_cast<std::size_t>(config.d_model);
  const auto hd = static_cast<std::size_t>(config.n_heads * config.d_head());
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const auto V = static_cast<std::size_t>(config.vocab);

  Model model;
  model.config = config;
  model.plant = plant;

  Rng rng(config.seed);
  model.embedding = gaussian(rng, V, dm, 1.0);
  model.layers.resize(static_cast<std::size_t>(config.n_layers));
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(dm));
  for (LayerWeights& w : model.layers) {
    w.attn_norm.assign(dm, 1.0);
    w.ffn_norm.assign(dm, 1.0);
    w.w_q = gaussian(rng, dm, hd, in_scale);
    w.w_k = gaussian(rng, dm, hd, in_scale);
    w.w_v = gaussian(rng, dm, hd, in_scale);
    w.w_o = gaussian(rng, hd, dm, 1.0 / std::sqrt(static_cast<double>(hd)));
    w.w_gate = gaussian(rng, dm, ff, in_scale);
    w.w_up = gaussian(rng, dm, ff, in_scale);
    w.w_down = gaussian(rng, ff, dm, 1.0 / std::sqrt(static_cast<double>(ff)));
  }
  model.final_norm.assign(dm, 1.0);
  model.w_out = gaussian(rng, dm, V, in_scale);
  model.token_label_u.assign(V, 0.0);
  model.token_label_d.assign(V, 0.0);

  if (plant) apply_plant(model, *plant);
  return model;
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::span<const double> values) {
    for (double v : values) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xffU;
        h *= 0x100000001b3ULL;
      }
    }
  };
  mix(embedding.data());
  for (const LayerWeights& w : layers) {
    mix(w.attn_norm);
    mix(w.ffn_norm);
    mix(w.w_q.data());
    mix(w.w_k.data());
    mix(w.w_v.data());
    mix(w.w_o.data());
    mix(w.w_gate.data());
    mix(w.w_up.data());
    mix(w.w_down.data());
  }
  mix(final_norm);
  mix(w_out.data());
  return h;
}

// ---------------------------------------------------------------------------

std::string_view hook_kind_name(HookKind kind) {
  switch (kind) {
    case HookKind::HeadOut: return "head_out";
    case HookKind::ConcatZ: return "concat_z";
    case HookKind::FfnAct: return "ffn_act_m";
    case HookKind::ResidualPostFfn: return "residual_post_ffn";
    case HookKind::FfnDownOut: return "ffn_down_out";
    case HookKind::NextTokenDist: return "next_token_dist";
  }
  throw std::invalid_argument("unknown hook kind");
}

HookKind parse_hook_kind(std::string_view name) {
  for (int i = 0; i < kHookKindCount; ++i) {
    const auto k = static_cast<HookKind>(i);
    if (hook_kind_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown hook kind: " + std::string(name));
}

std::size_t expected_hook_length(const ModelConfig& config, HookKind kind) {
  switch (kind) {
    case HookKind::HeadOut: return static_cast<std::size_t>(config.d_head());
    case HookKind::ConcatZ: return static_cast<std::size_t>(config.n_heads * config.d_head());
    case HookKind::FfnAct: return static_cast<std::size_t>(config.d_ff);
    case HookKind::ResidualPostFfn:
    case HookKind::FfnDownOut: return static_cast<std::size_t>(config.d_model);
    case HookKind::NextTokenDist: return static_cast<std::size_t>(config.vocab);
  }
  throw std::invalid_argument("unknown hook kind");
}

void write_trace_jsonl(std::ostream& out, std::span<const HookRecord> records) {
  for (const HookRecord& r : records) {
    json j;
    j["prompt_id"] = r.prompt_id;
    j["layer"] = r.layer;
    j["step"] = r.step;
    j["kind"] = hook_kind_name(r.kind);
    j["head"] = r.head ? json(*r.head + 1) : json(nullptr);
    j["values"] = r.values;
    out << j.dump() << '\n';
  }
}

std::vector<HookRecord> read_trace_jsonl(std::istream& in) {
  std::vector<HookRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      if (j.contains("schema_version")) continue;  // artifact header line
      HookRecord r;
      r.prompt_id = j.at("prompt_id").get<int>();
      r.layer = j.at("layer").get<int>();
      r.step = j.at("step").get<int>();
      r.kind = parse_hook_kind(j.at("kind").get<std::string>());
      const json& head = j.at("head");
      if (!head.is_null()) r.head = head.get<int>() - 1;
      r.values = j.at("values").get<Vector>();
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw std::runtime_error("trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

// ---------------------------------------------------------------------------

std::string_view steering_site_name(SteeringSite site) {
  switch (site) {
    case SteeringSite::ResidualPostFfn: return "residual_post_ffn";
    case SteeringSite::FfnDownOutput: return "ffn_down_output";
    case SteeringSite::HeadOutput: return "head_output_topk";
  }
  throw std::invalid_argument("unknown steering site");
}

SteeringSite parse_steering_site(std::string_view name) {
  for (SteeringSite s : {SteeringSite::ResidualPostFfn, SteeringSite::FfnDownOutput, SteeringSite::HeadOutput})
    if (steering_site_name(s) == name) return s;
  throw std::invalid_argument("unknown steering site: " + std::string(name));
}

namespace {

struct InterventionChecker {
  const ModelConfig& cfg;

  void layer(int l) const {
    if (l < 0 || l >= cfg.n_layers) throw std::invalid_argument("intervention layer out of range: " + std::to_string(l));
  }
  void heads(std::span<const int> hs) const {
    for (int h : hs)
      if (h < 0 || h >= cfg.n_heads) throw std::invalid_argument("intervention head out of range: " + std::to_string(h));
  }
  void operator()(const HeadMask& m) const {
    layer(m.layer);
    heads(m.heads);
  }
  void operator()(const FfnGate& g) const {
    layer(g.layer);
    heads(g.shared_heads);
    for (int r : g.units)
      if (r < 0 || r >= cfg.d_ff) throw std::invalid_argument("intervention unit out of range: " + std::to_string(r));
  }
  void operator()(const DlcEdit& e) const {
    layer(e.layer);
    std::size_t len = static_cast<std::size_t>(cfg.d_model);
    if (e.site == SteeringSite::HeadOutput) {
      if (e.head < 0 || e.head >= cfg.n_heads) throw std::invalid_argument("head-site edit needs a valid head");
      len = static_cast<std::size_t>(cfg.d_head());
    }
    if (e.u.size() != len || e.d.size() != len) throw std::invalid_argument("steering direction length mismatch");
    if (!(e.k > 0.0) || !(e.eps_log > 0.0)) throw std::invalid_argument("steering needs k > 0 and eps_log > 0");
    if (!(e.alpha_u >= 0.0 && e.alpha_u <= 1.0)) throw std::invalid_argument("alpha_u outside [0, 1]");
  }
  void operator()(const ResidualAdd& a) const {
    layer(a.layer);
    if (a.delta.size() != static_cast<std::size_t>(cfg.d_model))
      throw std::invalid_argument("residual delta length mismatch");
  }
};

}  // namespace

void validate_interventions(const Model& model, std::span<const Intervention> interventions) {
  const InterventionChecker check{model.config};
  std::set<int> gated_layers;
  for (const Intervention& iv : interventions) {
    std::visit(check, iv);
    if (const auto* g = std::get_if<FfnGate>(&iv)) {
      if (!gated_layers.insert(g->layer).second)
        throw std::invalid_argument("more than one FFN gate at layer " + std::to_string(g->layer));
    }
  }
}

double softmax_u_from_gap(double gap) {
  // 1 / (1 + e^{-gap}), evaluated without overflow.
  if (gap >= 0.0) return 1.0 / (1.0 + std::exp(-gap));
  const double e = std::exp(gap);
  return e / (1.0 + e);
}

Vector rms_normalize(std::span<const double> x) {
  constexpr double kEps = 1e-6;
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(ms + kEps);
  Vector out(x.begin(), x.end());
  for (double& v : out) v *= inv;
  return out;
}

namespace {

double silu(double x) { return x / (1.0 + std::exp(-x)); }

Vector norm_scaled(std::span<const double> x, std::span<const double> scale) {
  Vector out = rms_normalize(x);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= scale[i];
  return out;
}

void softmax_inplace(std::span<double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

AuditEntry apply_dlc(const DlcEdit& e, std::span<double> state, const StepContext& ctx) {
  const StepAudit a = steer_step(state, e.u, e.d, PreferenceVector::from_u(e.alpha_u), e.k, e.eps_log);
  return AuditEntry{ctx.prompt_id, ctx.step, e.layer, e.site, e.head, e.alpha_u, a.delta_norm, a.pre_gap, a.post_gap};
}

}  // namespace

Vector ffn_activation(std::span<const double> x, const LayerWeights& weights) {
  Vector gate = kernels::serial::vecmat(x, weights.w_gate);
  const Vector up = kernels::serial::vecmat(x, weights.w_up);
  for (std::size_t r = 0; r < gate.size(); ++r) gate[r] = silu(gate[r]) * up[r];
  return gate;
}

ForwardResult forward(const Model& model, std::span<const int> tokens, const HookSet& hooks,
                      std::span<const Intervention> interventions, StepContext context) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  const ModelConfig& cfg = model.config;
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab) throw std::invalid_argument("forward: token id out of range: " + std::to_string(t));
  validate_interventions(model, interventions);

  const std::size_t T = tokens.size();
  const std::size_t last = T - 1;
  const int H = cfg.n_heads;
  const auto dh = static_cast<std::size_t>(cfg.d_head());
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardResult result;
  std::vector<Vector> h(T);
  for (std::size_t t = 0; t < T; ++t) {
    const auto row = model.embedding.row(static_cast<std::size_t>(tokens[t]));
    h[t].assign(row.begin(), row.end());
  }

  auto record = [&](int layer, HookKind kind, std::optional<int> head, std::span<const double> values) {
    result.trace.push_back(HookRecord{context.prompt_id, layer, context.step, kind, head,
                                      Vector(values.begin(), values.end())});
  };

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& w = model.layers[static_cast<std::size_t>(l)];

    std::vector<Vector> q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      const Vector x = norm_scaled(h[t], w.attn_norm);
      q[t] = kernels::serial::vecmat(x, w.w_q);
      k[t] = kernels::serial::vecmat(x, w.w_k);
      v[t] = kernels::serial::vecmat(x, w.w_v);
    }

    std::vector<Vector> z(T, Vector(static_cast<std::size_t>(H) * dh, 0.0));
    Vector weights(T);
    for (std::size_t t = 0; t < T; ++t) {
      for (int hd = 0; hd < H; ++hd) {
        const std::size_t off = static_cast<std::size_t>(hd) * dh;
        for (std::size_t j = 0; j <= t; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q[t][off + c] * k[j][off + c];
          weights[j] = s * inv_sqrt_dh;
        }
        softmax_inplace(std::span<double>(weights.data(), t + 1));
        for (std::size_t j = 0; j <= t; ++j)
          for (std::size_t c = 0; c < dh; ++c) z[t][off + c] += weights[j] * v[j][off + c];
      }
    }

    const FfnGate* gate = nullptr;
    for (const Intervention& iv : interventions) {
      if (const auto* m = std::get_if<HeadMask>(&iv); m != nullptr && m->layer == l) {
        for (auto& zt : z)
          for (int hd : m->heads)
            std::fill_n(zt.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(hd) * dh), dh, 0.0);
      }
      if (const auto* g = std::get_if<FfnGate>(&iv); g != nullptr && g->layer == l) gate = g;
    }
    for (const Intervention& iv : interventions) {
      const auto* e = std::get_if<DlcEdit>(&iv);
      if (e == nullptr || e->layer != l || e->site != SteeringSite::HeadOutput) continue;
      for (std::size_t t = 0; t < T; ++t) {
        std::span<double> block(z[t].data() + static_cast<std::size_t>(e->head) * dh, dh);
        AuditEntry a = apply_dlc(*e, block, context);
        if (t == last) result.audit.push_back(a);
      }
    }

    Vector m_last;
    Vector down_last;
    for (std::size_t t = 0; t < T; ++t) {
      const Vector attn_out = kernels::serial::vecmat(z[t], w.w_o);
      for (std::size_t c = 0; c < h[t].size(); ++c) h[t][c] += attn_out[c];

      const Vector x = norm_scaled(h[t], w.ffn_norm);
      Vector m;
      if (gate != nullptr) {
        const Vector delta = masking_deviation(z[t], gate->shared_heads, w.w_o, static_cast<int>(dh));
        m = gated_activation(x, delta, gate->units, w);
      } else {
        m = ffn_activation(x, w);
      }
      Vector down = kernels::serial::vecmat(m, w.w_down);

      for (const Intervention& iv : interventions) {
        const auto* e = std::get_if<DlcEdit>(&iv);
        if (e == nullptr || e->layer != l || e->site != SteeringSite::FfnDownOutput) continue;
        AuditEntry a = apply_dlc(*e, down, context);
        if (t == last) result.audit.push_back(a);
      }
      for (std::size_t c = 0; c < h[t].size(); ++c) h[t][c] += down[c];

      for (const Intervention& iv : interventions) {
        if (const auto* add = std::get_if<ResidualAdd>(&iv); add != nullptr && add->layer == l)
          for (std::size_t c = 0; c < h[t].size(); ++c) h[t][c] += add->delta[c];
      }
      for (const Intervention& iv : interventions) {
        const auto* e = std::get_if<DlcEdit>(&iv);
        if (e == nullptr || e->layer != l || e->site != SteeringSite::ResidualPostFfn) continue;
        AuditEntry a = apply_dlc(*e, h[t], context);
        if (t == last) result.audit.push_back(a);
      }
      if (t == last) {
        m_last = std::move(m);
        down_last = std::move(down);
      }
    }

    if (hooks.contains(HookKind::HeadOut)) {
      for (int hd = 0; hd < H; ++hd)
        record(l, HookKind::HeadOut, hd,
               std::span<const double>(z[last].data() + static_cast<std::size_t>(hd) * dh, dh));
    }
    if (hooks.contains(HookKind::ConcatZ)) record(l, HookKind::ConcatZ, std::nullopt, z[last]);
    if (hooks.contains(HookKind::FfnAct)) record(l, HookKind::FfnAct, std::nullopt, m_last);
    if (hooks.contains(HookKind::FfnDownOut)) record(l, HookKind::FfnDownOut, std::nullopt, down_last);
    if (hooks.contains(HookKind::ResidualPostFfn)) record(l, HookKind::ResidualPostFfn, std::nullopt, h[last]);
  }

  const Vector x = norm_scaled(h[last], model.final_norm);
  result.next_token_dist = kernels::serial::vecmat(x, model.w_out);
  softmax_inplace(result.next_token_dist);
  if (hooks.contains(HookKind::NextTokenDist))
    record(cfg.n_layers, HookKind::NextTokenDist, std::nullopt, result.next_token_dist);
  return result;
}

GenerationResult generate(const Model& model, std::span<const int> prompt, int max_steps, const HookSet& hooks,
                          std::span<const Intervention> interventions, int prompt_id) {
  if (max_steps < 1) throw std::invalid_argument("generate: max_steps must be >= 1");
  GenerationResult out;
  out.prompt_id = prompt_id;
  std::vector<int> seq(prompt.begin(), prompt.end());
  for (int step = 0; step < max_steps; ++step) {
    ForwardResult fr = forward(model, seq, hooks, interventions, StepContext{prompt_id, step});
    const auto best = std::max_element(fr.next_token_dist.begin(), fr.next_token_dist.end());
    const int token = static_cast<int>(best - fr.next_token_dist.begin());
    seq.push_back(token);
    out.tokens.push_back(token);
    out.step_dists.push_back(std::move(fr.next_token_dist));
    std::move(fr.trace.begin(), fr.trace.end(), std::back_inserter(out.trace));
    std::move(fr.audit.begin(), fr.audit.end(), std::back_inserter(out.audit));
  }
  return out;
}

std::vector<Prompt> make_prompts(const Model& model, int count, std::uint64_t seed) {
  if (count < 0) throw std::invalid_argument("make_prompts: negative count");
  const ModelConfig& cfg = model.config;
  std::vector<int> pool;
  std::vector<int> anchor;
  int length = 4;
  if (model.plant) {
    const PlantSpec& p = *model.plant;
    const std::set<int> excluded = [&] {
      std::set<int> s(p.anchor.begin(), p.anchor.end());
      s.insert(p.utilitarian.indicator_token);
      s.insert(p.deontological.indicator_token);
      return s;
    }();
    for (int t = 0; t < cfg.vocab; ++t)
      if (excluded.count(t) == 0) pool.push_back(t);
    anchor = p.anchor;
    length = p.scenario_length;
  } else {
    for (int t = 0; t < cfg.vocab; ++t) pool.push_back(t);
  }

  Rng rng(seed);
  std::vector<Prompt> prompts;
  prompts.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Prompt p;
    p.id = i;
    for (int j = 0; j < length; ++j) {
      const int t = pool[rng.below(pool.size())];
      p.tokens.push_back(t);
      p.label_u += model.token_label_u[static_cast<std::size_t>(t)];
      p.label_d += model.token_label_d[static_cast<std::size_t>(t)];
    }
    p.label_u /= length;
    p.label_d /= length;
    p.tokens.insert(p.tokens.end(), anchor.begin(), anchor.end());
    prompts.push_back(std::move(p));
  }
  return prompts;
}

}  // namespace cdrsteer
