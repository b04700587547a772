#include "cdrsteer/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "cdrsteer/cdr.hpp"
#include "cdrsteer/csp.hpp"
#include "serialize.hpp"

namespace cdrsteer {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Config JSON

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!obj.is_object()) throw std::invalid_argument("config: '" + std::string(where) + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw std::invalid_argument("config: unknown key '" + key + "' in '" + std::string(where) + "'");
  }
}

template <class T>
void take(const json& obj, const char* key, T& dst) {
  if (obj.contains(key)) dst = obj.at(key).get<T>();
}

const json& section(const json& j, const char* key) {
  static const json empty = json::object();
  return j.contains(key) ? j.at(key) : empty;
}

std::vector<std::vector<int>> shift_sets(const std::vector<std::vector<int>>& sets, int by) {
  auto out = sets;
  for (auto& s : out)
    for (int& v : s) v += by;
  return out;
}

json framework_plant_json(const FrameworkPlant& p) {
  return {{"heads", shift_sets(p.heads, 1)},
          {"ffn_units", shift_sets(p.ffn_units, 1)},
          {"indicator_token", p.indicator_token}};
}

void framework_plant_from(const json& j, FrameworkPlant& p, std::string_view where) {
  check_keys(j, {"heads", "ffn_units", "indicator_token"}, where);
  if (j.contains("heads")) p.heads = shift_sets(j.at("heads").get<std::vector<std::vector<int>>>(), -1);
  if (j.contains("ffn_units")) p.ffn_units = shift_sets(j.at("ffn_units").get<std::vector<std::vector<int>>>(), -1);
  take(j, "indicator_token", p.indicator_token);
}

json framework_pair(double u, double d) { return {{"U", u}, {"D", d}}; }

void framework_pair_from(const json& j, double& u, double& d, std::string_view where) {
  check_keys(j, {"U", "D"}, where);
  take(j, "U", u);
  take(j, "D", d);
}

std::string_view std_convention_name(StdConvention c) { return c == StdConvention::Population ? "population" : "sample"; }

StdConvention parse_std_convention(std::string_view name) {
  if (name == "population") return StdConvention::Population;
  if (name == "sample") return StdConvention::Sample;
  throw std::invalid_argument("config: unknown std convention '" + std::string(name) + "'");
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Artifact envelopes

struct Context {
  const PipelineConfig& config;
  std::string hash;
  std::ostream* log;

  fs::path path(std::string_view name) const { return config.out_dir / fs::path(std::string(name)); }
};

void atomic_write(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string csv_preamble(const std::string& hash) {
  return "# schema=" + std::to_string(kSchemaVersion) + " config_hash=" + hash + "\n";
}

std::string jsonl_preamble(const std::string& hash) {
  return json{{"schema_version", kSchemaVersion}, {"config_hash", hash}}.dump() + "\n";
}

void write_json_artifact(const Context& ctx, std::string_view name, json payload) {
  const json doc = {{"schema_version", kSchemaVersion}, {"config_hash", ctx.hash}, {"payload", std::move(payload)}};
  atomic_write(ctx.path(name), doc.dump(2) + "\n");
}

template <class Writer>
void write_text_artifact(const Context& ctx, std::string_view name, const std::string& preamble, Writer&& writer) {
  std::ostringstream os;
  os << preamble;
  writer(os);
  atomic_write(ctx.path(name), os.str());
}

std::string read_artifact_text(const Context& ctx, std::string_view name, Stage producer) {
  const fs::path p = ctx.path(name);
  std::ifstream in(p, std::ios::binary);
  if (!in)
    throw ArtifactError("missing artifact " + p.string() + " (run stage '" + std::string(stage_name(producer)) +
                        "' first)");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void check_envelope(const Context& ctx, const fs::path& p, int schema, const std::string& hash) {
  if (schema != kSchemaVersion)
    throw ArtifactError("schema version mismatch in " + p.string() + ": found " + std::to_string(schema) +
                        ", expected " + std::to_string(kSchemaVersion));
  if (hash != ctx.hash)
    throw ArtifactError("config hash mismatch in " + p.string() + ": artifact " + hash + ", config " + ctx.hash +
                        " (re-run the producing stage)");
}

json read_json_artifact(const Context& ctx, std::string_view name, Stage producer) {
  const std::string text = read_artifact_text(ctx, name, producer);
  const fs::path p = ctx.path(name);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const std::exception& e) {
    throw ArtifactError("corrupt artifact " + p.string() + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("schema_version") || !doc.contains("config_hash") || !doc.contains("payload"))
    throw ArtifactError("corrupt artifact " + p.string() + ": missing envelope fields");
  check_envelope(ctx, p, doc.at("schema_version").get<int>(), doc.at("config_hash").get<std::string>());
  return doc.at("payload");
}

// Returns the body after a validated first line.
std::string read_text_artifact(const Context& ctx, std::string_view name, Stage producer, bool jsonl) {
  const std::string text = read_artifact_text(ctx, name, producer);
  const fs::path p = ctx.path(name);
  const auto eol = text.find('\n');
  const std::string first = text.substr(0, eol);
  int schema = -1;
  std::string hash;
  if (jsonl) {
    try {
      const json h = json::parse(first);
      schema = h.at("schema_version").get<int>();
      hash = h.at("config_hash").get<std::string>();
    } catch (const std::exception&) {
      throw ArtifactError("corrupt artifact " + p.string() + ": missing header line");
    }
  } else {
    char buf[64] = {0};
    if (std::sscanf(first.c_str(), "# schema=%d config_hash=%63s", &schema, buf) != 2)
      throw ArtifactError("corrupt artifact " + p.string() + ": missing header line");
    hash = buf;
  }
  check_envelope(ctx, p, schema, hash);
  return eol == std::string::npos ? std::string() : text.substr(eol + 1);
}

template <class Parser>
auto parse_artifact(const Context& ctx, std::string_view name, Parser&& parser) {
  try {
    return parser();
  } catch (const ArtifactError&) {
    throw;
  } catch (const std::exception& e) {
    throw ArtifactError("corrupt artifact " + ctx.path(name).string() + ": " + e.what());
  }
}

void note(const Context& ctx, Stage stage, std::string_view what) {
  if (ctx.log) *ctx.log << '[' << stage_name(stage) << "] " << what << '\n';
}

// ---------------------------------------------------------------------------
// Shared loaders

HeadScoreMap load_head_scores(const Context& ctx) {
  const std::string body = read_text_artifact(ctx, artifact::head_scores, Stage::Probe, false);
  return parse_artifact(ctx, artifact::head_scores, [&] {
    std::istringstream in(body);
    return read_head_scores_csv(in);
  });
}

BranchPointSet load_branch_points(const Context& ctx) {
  const json payload = read_json_artifact(ctx, artifact::branch_points, Stage::Branch);
  return parse_artifact(ctx, artifact::branch_points, [&] { return serialize::branch_points(payload); });
}

std::vector<HookRecord> load_traces(const Context& ctx, std::string_view name) {
  const std::string body = read_text_artifact(ctx, name, Stage::Binary, true);
  return parse_artifact(ctx, name, [&] {
    std::istringstream in(body);
    return read_trace_jsonl(in);
  });
}

std::vector<DirectionPair> load_directions(const Context& ctx) {
  const json payload = read_json_artifact(ctx, artifact::directions, Stage::Extract);
  return parse_artifact(ctx, artifact::directions, [&] { return serialize::direction_pairs(payload.at("pairs")); });
}

std::array<std::vector<Vector>, 2> load_probe_weights(const Context& ctx) {
  const json payload = read_json_artifact(ctx, artifact::probe_weights, Stage::Probe);
  return parse_artifact(ctx, artifact::probe_weights, [&] {
    return std::array<std::vector<Vector>, 2>{payload.at("U").get<std::vector<Vector>>(),
                                              payload.at("D").get<std::vector<Vector>>()};
  });
}

json eval_record_json(const EvalRecord& r) {
  json j = {{"prompt_id", r.prompt_id},   {"alpha_u", r.alpha_u}, {"compliant", r.compliant},
            {"hard_label", hard_label_name(r.hard_label)}, {"p_uti", r.p_uti}, {"p_deo", r.p_deo}};
  j["u_op"] = r.u_op ? json(*r.u_op) : json(nullptr);
  return j;
}

EvalRecord eval_record_from(const json& j) {
  EvalRecord r;
  r.prompt_id = j.at("prompt_id").get<int>();
  r.alpha_u = j.at("alpha_u").get<double>();
  r.compliant = j.at("compliant").get<bool>();
  r.hard_label = parse_hard_label(j.at("hard_label").get<std::string>());
  r.p_uti = j.at("p_uti").get<double>();
  r.p_deo = j.at("p_deo").get<double>();
  if (!j.at("u_op").is_null()) r.u_op = j.at("u_op").get<double>();
  return r;
}

Model pipeline_model(const PipelineConfig& config) { return build_model(config.model, config.plant); }

HookKind extraction_kind(const PipelineConfig& config) {
  return config.steering.site == SteeringSite::FfnDownOutput ? HookKind::FfnDownOut : HookKind::ResidualPostFfn;
}

// ---------------------------------------------------------------------------
// Stages

void stage_probe(const Context& ctx) {
  const PipelineConfig& cfg = ctx.config;
  const Model model = pipeline_model(cfg);
  const auto prompts = make_prompts(model, cfg.n_probe, cfg.probe.seed);
  const HeadFeatureSet fu = collect_head_features(model, prompts, Framework::Utilitarian);
  const HeadFeatureSet fd = collect_head_features(model, prompts, Framework::Deontological);
  const HeadScoreMap scores = probe_heads(fu, fd, cfg.probe, cfg.gamma_attn);

  write_text_artifact(ctx, artifact::probe_data_u, jsonl_preamble(ctx.hash),
                      [&](std::ostream& os) { write_probe_jsonl(os, fu); });
  write_text_artifact(ctx, artifact::probe_data_d, jsonl_preamble(ctx.hash),
                      [&](std::ostream& os) { write_probe_jsonl(os, fd); });
  write_text_artifact(ctx, artifact::head_scores, csv_preamble(ctx.hash),
                      [&](std::ostream& os) { write_head_scores_csv(os, scores); });
  write_json_artifact(ctx, artifact::probe_weights,
                      {{"n_layers", model.config.n_layers},
                       {"n_heads", model.config.n_heads},
                       {"lambda", cfg.probe.lambda},
                       {"U", fit_head_probes(fu, cfg.probe.lambda)},
                       {"D", fit_head_probes(fd, cfg.probe.lambda)}});
  note(ctx, Stage::Probe,
       std::to_string(scores.selected[0].size()) + " U heads, " + std::to_string(scores.selected[1].size()) +
           " D heads selected");
}

void stage_ffn_scan(const Context& ctx) {
  const PipelineConfig& cfg = ctx.config;
  const Model model = pipeline_model(cfg);
  std::vector<FFNSelection> selections;
  for (Framework f : kFrameworks) {
    const Vector v = target_direction(model, cfg.plant.of(f).indicator_token);
    selections.push_back(score_and_select(model, v, cfg.gamma_ffn[static_cast<std::size_t>(framework_index(f))], f,
                                          cfg.std_convention));
  }
  write_text_artifact(ctx, artifact::ffn_selection, csv_preamble(ctx.hash),
                      [&](std::ostream& os) { write_ffn_selection_csv(os, selections); });
  note(ctx, Stage::FfnScan, "wrote " + std::string(artifact::ffn_selection));
}

void stage_branch(const Context& ctx) {
  const HeadScoreMap scores = load_head_scores(ctx);
  const std::string body = read_text_artifact(ctx, artifact::ffn_selection, Stage::FfnScan, false);
  const auto selections = parse_artifact(ctx, artifact::ffn_selection, [&] {
    std::istringstream in(body);
    return read_ffn_selection_csv(in);
  });
  const FFNSelection* sel[2] = {nullptr, nullptr};
  for (const FFNSelection& s : selections) sel[framework_index(s.framework)] = &s;
  if (!sel[0] || !sel[1])
    throw ArtifactError("corrupt artifact " + ctx.path(artifact::ffn_selection).string() +
                        ": needs both frameworks");
  const BranchPointSet branch = detect_branch_points(scores, *sel[0], *sel[1], ctx.config.tau);
  write_json_artifact(ctx, artifact::branch_points, serialize::branch_points(branch));
  std::string layers;
  for (int l : branch.layers()) layers += (layers.empty() ? "" : ",") + std::to_string(l);
  note(ctx, Stage::Branch, "branch layers {" + layers + "}");
}

void stage_binary(const Context& ctx) {
  const PipelineConfig& cfg = ctx.config;
  const BranchPointSet branch = load_branch_points(ctx);
  const Model model = pipeline_model(cfg);
  const auto prompts = make_prompts(model, cfg.n_steer, cfg.prompt_seed);
  GenerationOptions options;
  options.max_steps = cfg.gen_steps;
  options.hooks = HookSet{HookKind::ResidualPostFfn, HookKind::FfnDownOut};
  for (Framework f : kFrameworks) {
    const BinaryPreference pref =
        f == Framework::Utilitarian ? BinaryPreference::utilitarian() : BinaryPreference::deontological();
    const auto results = run_binary_control(model, prompts, pref, branch, options);
    std::vector<HookRecord> trace;
    for (const GenerationResult& r : results) trace.insert(trace.end(), r.trace.begin(), r.trace.end());
    write_text_artifact(ctx, f == Framework::Utilitarian ? artifact::binary_traces_u : artifact::binary_traces_d,
                        jsonl_preamble(ctx.hash), [&](std::ostream& os) { write_trace_jsonl(os, trace); });
  }
  note(ctx, Stage::Binary, std::to_string(prompts.size()) + " prompts per binary setting");
}

void stage_extract(const Context& ctx) {
  const PipelineConfig& cfg = ctx.config;
  const BranchPointSet branch = load_branch_points(ctx);
  const auto trace_u = load_traces(ctx, artifact::binary_traces_u);
  const auto trace_d = load_traces(ctx, artifact::binary_traces_d);
  std::vector<int> layers = cfg.steering.single_layer ? std::vector<int>{*cfg.steering.single_layer} : branch.layers();
  if (layers.empty())
    throw std::runtime_error("extract: no branch points were detected and no steering layer is configured");

  const HookKind kind = extraction_kind(cfg);
  const ResidualPair residuals = parse_artifact(ctx, artifact::binary_traces_u,
                                                [&] { return record_residual_pair(trace_u, trace_d, layers, kind); });
  std::vector<DirectionPair> pairs;
  json diagnostics = json::array();
  for (int l : layers) {
    DirectionPair p = extract_pair(residuals.utilitarian.at(l), residuals.deontological.at(l), cfg.csp);
    p.layer = l;
    diagnostics.push_back({{"layer", l},
                           {"jitter", p.jitter},
                           {"degenerate", p.degenerate},
                           {"u_flipped", p.u_flipped},
                           {"d_flipped", p.d_flipped}});
    pairs.push_back(std::move(p));
  }
  write_json_artifact(ctx, artifact::directions,
                      {{"hook", hook_kind_name(kind)},
                       {"pairs", serialize::direction_pairs(pairs)},
                       {"diagnostics", diagnostics}});
  note(ctx, Stage::Extract, std::to_string(pairs.size()) + " direction pairs");
}

void stage_steer(const Context& ctx) {
  const PipelineConfig& cfg = ctx.config;
  const SteeringConfig& sc = cfg.steering;
  const auto pairs = load_directions(ctx);
  const BranchPointSet branch = sc.mode == PipelineMode::PolarizeThenCalibrate ? load_branch_points(ctx)
                                                                               : BranchPointSet{};
  std::vector<HeadDirection> heads;
  if (sc.site == SteeringSite::HeadOutput) {
    const HeadScoreMap scores = load_head_scores(ctx);
    const auto weights = load_probe_weights(ctx);
    const int k = sc.top_k > 0 ? sc.top_k : default_top_k(scores);
    heads = select_top_k_heads(scores, weights[0], weights[1], k);
  }

  const Model model = pipeline_model(cfg);
  const auto prompts = make_prompts(model, cfg.n_eval, cfg.prompt_seed + 1);
  GenerationOptions options;
  options.max_steps = cfg.gen_steps;
  options.hooks = HookSet{};
  const FineGrainedRun run = run_fine_grained(model, prompts, cfg.alpha_grid, pairs, heads, branch, sc, options);

  std::vector<AuditEntry> audit;
  std::ostringstream records;
  records << jsonl_preamble(ctx.hash);
  for (const FineGrainedPoint& point : run.points) {
    for (const GenerationResult& g : point.generations) {
      audit.insert(audit.end(), g.audit.begin(), g.audit.end());
      records << eval_record_json(make_eval_record(model, g, point.alpha_u)).dump() << '\n';
    }
  }

  std::set<int> layer_set;
  json head_list = json::array();
  if (sc.site == SteeringSite::HeadOutput) {
    for (const HeadDirection& h : heads) {
      if (sc.single_layer && h.layer != *sc.single_layer) continue;
      layer_set.insert(h.layer);
      head_list.push_back({{"layer", h.layer}, {"head", h.head + 1}, {"score", h.score}});
    }
  } else {
    for (const DirectionPair& p : pairs)
      if (!sc.single_layer || p.layer == *sc.single_layer) layer_set.insert(p.layer);
  }
  json manifest = {{"alpha_u", cfg.alpha_grid},
                   {"site", steering_site_name(sc.site)},
                   {"layers", std::vector<int>(layer_set.begin(), layer_set.end())},
                   {"k", sc.k},
                   {"eps_log", sc.eps_log},
                   {"mode", pipeline_mode_name(sc.mode)}};
  if (sc.site == SteeringSite::HeadOutput) manifest["heads"] = head_list;

  write_json_artifact(ctx, artifact::steer_manifest, manifest);
  write_text_artifact(ctx, artifact::audit_log, csv_preamble(ctx.hash),
                      [&](std::ostream& os) { write_audit_csv(os, audit); });
  atomic_write(ctx.path(artifact::eval_records), records.str());
  note(ctx, Stage::Steer,
       std::to_string(run.points.size()) + " α levels, " + std::to_string(audit.size()) + " audited edits");
}

void stage_evaluate(const Context& ctx) {
  const std::string body = read_text_artifact(ctx, artifact::eval_records, Stage::Steer, true);
  const auto records = parse_artifact(ctx, artifact::eval_records, [&] {
    std::vector<EvalRecord> out;
    std::istringstream in(body);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) out.push_back(eval_record_from(json::parse(line)));
    return out;
  });
  const CalibrationReport report = build_calibration_report(records);
  write_text_artifact(ctx, artifact::calibration_report, csv_preamble(ctx.hash),
                      [&](std::ostream& os) { write_calibration_csv(os, report); });
  std::ostringstream summary;
  write_calibration_summary_json(summary, report);
  write_json_artifact(ctx, artifact::calibration_summary, json::parse(summary.str()));
  std::ostringstream msg;
  msg << report.rows.size() << " rows, MAE " << report.mae_pp << " pp, rho " << report.rank.rho << ", MVR "
      << report.rank.mvr;
  note(ctx, Stage::Evaluate, msg.str());
}

}  // namespace

// ---------------------------------------------------------------------------

void PipelineConfig::validate() const {
  model.validate();
  plant.validate(model);
  if (probe.folds < 2) throw std::invalid_argument("config: probe.folds must be >= 2");
  if (n_probe < 2 * probe.folds) throw std::invalid_argument("config: probe.n_prompts must be >= 2 * folds");
  if (!(probe.lambda > 0.0)) throw std::invalid_argument("config: probe.lambda must be > 0");
  for (double g : {gamma_attn.utilitarian, gamma_attn.deontological})
    if (!(g >= -1.0 && g <= 1.0)) throw std::invalid_argument("config: gamma_attn must lie in [-1, 1]");
  for (double g : gamma_ffn)
    if (!std::isfinite(g)) throw std::invalid_argument("config: gamma_ffn must be finite");
  if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("config: tau must lie in (0, 1]");
  if (!(csp.shrinkage >= 0.0 && csp.shrinkage <= 1.0))
    throw std::invalid_argument("config: csp.shrinkage must lie in [0, 1]");
  if (!(csp.relative_jitter >= 0.0)) throw std::invalid_argument("config: csp.jitter must be >= 0");
  steering.validate();
  if (steering.single_layer && *steering.single_layer >= model.n_layers)
    throw std::invalid_argument("config: steering.layer out of range");
  if (alpha_grid.empty()) throw std::invalid_argument("config: alpha_grid is empty");
  std::set<double> seen;
  for (double a : alpha_grid) {
    if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("config: alpha_grid values must lie in [0, 1]");
    if (!seen.insert(a).second) throw std::invalid_argument("config: alpha_grid has duplicate values");
  }
  if (n_steer < 2) throw std::invalid_argument("config: prompts.n_steer must be >= 2");
  if (n_eval < 1) throw std::invalid_argument("config: prompts.n_eval must be >= 1");
  if (gen_steps < 1) throw std::invalid_argument("config: prompts.gen_steps must be >= 1");
  if (out_dir.empty()) throw std::invalid_argument("config: out_dir is empty");
}

json config_to_json(const PipelineConfig& c) {
  const PlantSpec& p = c.plant;
  return {
      {"model",
       {{"n_layers", c.model.n_layers},
        {"n_heads", c.model.n_heads},
        {"d_model", c.model.d_model},
        {"d_ff", c.model.d_ff},
        {"vocab", c.model.vocab},
        {"seed", c.model.seed}}},
      {"plant",
       {{"signal", p.signal},
        {"noise", p.noise},
        {"ffn_scale", p.ffn_scale},
        {"ffn_noise", p.ffn_noise},
        {"head_gain", p.head_gain},
        {"gate_gain", p.gate_gain},
        {"down_gain", p.down_gain},
        {"out_gain", p.out_gain},
        {"anchor_gain", p.anchor_gain},
        {"label_scale", p.label_scale},
        {"anchor", p.anchor},
        {"scenario_length", p.scenario_length},
        {"U", framework_plant_json(p.utilitarian)},
        {"D", framework_plant_json(p.deontological)}}},
      {"probe",
       {{"n_prompts", c.n_probe}, {"lambda", c.probe.lambda}, {"folds", c.probe.folds}, {"seed", c.probe.seed}}},
      {"thresholds",
       {{"gamma_attn", framework_pair(c.gamma_attn.utilitarian, c.gamma_attn.deontological)},
        {"gamma_ffn", framework_pair(c.gamma_ffn[0], c.gamma_ffn[1])},
        {"std", std_convention_name(c.std_convention)},
        {"tau", c.tau}}},
      {"csp", {{"shrinkage", c.csp.shrinkage}, {"jitter", c.csp.relative_jitter}}},
      {"steering",
       {{"site", steering_site_name(c.steering.site)},
        {"mode", pipeline_mode_name(c.steering.mode)},
        {"k", c.steering.k},
        {"eps_log", c.steering.eps_log},
        {"layer", c.steering.single_layer ? json(*c.steering.single_layer) : json(nullptr)},
        {"top_k", c.steering.top_k},
        {"alpha_grid", c.alpha_grid}}},
      {"prompts",
       {{"n_steer", c.n_steer}, {"n_eval", c.n_eval}, {"seed", c.prompt_seed}, {"gen_steps", c.gen_steps}}},
      {"out_dir", c.out_dir.generic_string()},
  };
}

PipelineConfig config_from_json(const json& j) {
  try {
    check_keys(j, {"model", "plant", "probe", "thresholds", "csp", "steering", "prompts", "out_dir"}, "root");
    PipelineConfig c;

    const json& m = section(j, "model");
    check_keys(m, {"n_layers", "n_heads", "d_model", "d_ff", "vocab", "seed"}, "model");
    take(m, "n_layers", c.model.n_layers);
    take(m, "n_heads", c.model.n_heads);
    take(m, "d_model", c.model.d_model);
    take(m, "d_ff", c.model.d_ff);
    take(m, "vocab", c.model.vocab);
    take(m, "seed", c.model.seed);
    c.model.validate();

    const json& p = section(j, "plant");
    check_keys(p, {"signal", "noise", "ffn_scale", "ffn_noise", "head_gain", "gate_gain", "down_gain", "out_gain",
                   "anchor_gain", "label_scale", "anchor", "scenario_length", "U", "D"},
               "plant");
    const bool custom_layout = p.contains("U") && p.contains("D") && p.contains("anchor");
    if (!custom_layout) c.plant = PlantSpec::standard(c.model);
    take(p, "signal", c.plant.signal);
    take(p, "noise", c.plant.noise);
    take(p, "ffn_scale", c.plant.ffn_scale);
    take(p, "ffn_noise", c.plant.ffn_noise);
    take(p, "head_gain", c.plant.head_gain);
    take(p, "gate_gain", c.plant.gate_gain);
    take(p, "down_gain", c.plant.down_gain);
    take(p, "out_gain", c.plant.out_gain);
    take(p, "anchor_gain", c.plant.anchor_gain);
    take(p, "label_scale", c.plant.label_scale);
    take(p, "anchor", c.plant.anchor);
    take(p, "scenario_length", c.plant.scenario_length);
    if (p.contains("U")) framework_plant_from(p.at("U"), c.plant.utilitarian, "plant.U");
    if (p.contains("D")) framework_plant_from(p.at("D"), c.plant.deontological, "plant.D");

    const json& pr = section(j, "probe");
    check_keys(pr, {"n_prompts", "lambda", "folds", "seed"}, "probe");
    take(pr, "n_prompts", c.n_probe);
    take(pr, "lambda", c.probe.lambda);
    take(pr, "folds", c.probe.folds);
    take(pr, "seed", c.probe.seed);

    const json& t = section(j, "thresholds");
    check_keys(t, {"gamma_attn", "gamma_ffn", "std", "tau"}, "thresholds");
    if (t.contains("gamma_attn"))
      framework_pair_from(t.at("gamma_attn"), c.gamma_attn.utilitarian, c.gamma_attn.deontological,
                          "thresholds.gamma_attn");
    if (t.contains("gamma_ffn"))
      framework_pair_from(t.at("gamma_ffn"), c.gamma_ffn[0], c.gamma_ffn[1], "thresholds.gamma_ffn");
    if (t.contains("std")) c.std_convention = parse_std_convention(t.at("std").get<std::string>());
    take(t, "tau", c.tau);

    const json& cs = section(j, "csp");
    check_keys(cs, {"shrinkage", "jitter"}, "csp");
    take(cs, "shrinkage", c.csp.shrinkage);
    take(cs, "jitter", c.csp.relative_jitter);

    const json& s = section(j, "steering");
    check_keys(s, {"site", "mode", "k", "eps_log", "layer", "top_k", "alpha_grid"}, "steering");
    if (s.contains("site")) c.steering.site = parse_steering_site(s.at("site").get<std::string>());
    if (s.contains("mode")) c.steering.mode = parse_pipeline_mode(s.at("mode").get<std::string>());
    take(s, "k", c.steering.k);
    take(s, "eps_log", c.steering.eps_log);
    if (s.contains("layer") && !s.at("layer").is_null()) c.steering.single_layer = s.at("layer").get<int>();
    take(s, "top_k", c.steering.top_k);
    take(s, "alpha_grid", c.alpha_grid);

    const json& pm = section(j, "prompts");
    check_keys(pm, {"n_steer", "n_eval", "seed", "gen_steps"}, "prompts");
    take(pm, "n_steer", c.n_steer);
    take(pm, "n_eval", c.n_eval);
    take(pm, "seed", c.prompt_seed);
    take(pm, "gen_steps", c.gen_steps);

    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_template() { return config_to_json(PipelineConfig{}).dump(2) + "\n"; }

std::string config_hash(const PipelineConfig& config) {
  json j = config_to_json(config);
  j.erase("out_dir");
  return fnv1a_hex(j.dump());
}

std::string_view stage_name(Stage stage) {
  switch (stage) {
    case Stage::Probe: return "probe";
    case Stage::FfnScan: return "ffn_scan";
    case Stage::Branch: return "branch";
    case Stage::Binary: return "binary";
    case Stage::Extract: return "extract";
    case Stage::Steer: return "steer";
    case Stage::Evaluate: return "evaluate";
    case Stage::Pipeline: return "pipeline";
  }
  return "pipeline";
}

Stage parse_stage(std::string_view name) {
  for (Stage s : {Stage::Probe, Stage::FfnScan, Stage::Branch, Stage::Binary, Stage::Extract, Stage::Steer,
                  Stage::Evaluate, Stage::Pipeline})
    if (stage_name(s) == name) return s;
  throw std::invalid_argument("unknown stage: " + std::string(name));
}

void run_stage(const PipelineConfig& config, Stage stage, std::ostream* log) {
  config.validate();
  const Context ctx{config, config_hash(config), log};
  switch (stage) {
    case Stage::Probe: return stage_probe(ctx);
    case Stage::FfnScan: return stage_ffn_scan(ctx);
    case Stage::Branch: return stage_branch(ctx);
    case Stage::Binary: return stage_binary(ctx);
    case Stage::Extract: return stage_extract(ctx);
    case Stage::Steer: return stage_steer(ctx);
    case Stage::Evaluate: return stage_evaluate(ctx);
    case Stage::Pipeline:
      for (Stage s : {Stage::Probe, Stage::FfnScan, Stage::Branch, Stage::Binary, Stage::Extract, Stage::Steer,
                      Stage::Evaluate})
        run_stage(config, s, log);
      return;
  }
}

EvalRecord make_eval_record(const Model& model, const GenerationResult& generation, double alpha_u) {
  if (!model.plant) throw std::invalid_argument("make_eval_record: model has no indicator tokens");
  if (generation.step_dists.empty() || generation.tokens.empty())
    throw std::invalid_argument("make_eval_record: empty generation");
  const int tok_u = model.plant->utilitarian.indicator_token;
  const int tok_d = model.plant->deontological.indicator_token;
  const Vector& dist = generation.step_dists.front();
  EvalRecord r;
  r.prompt_id = generation.prompt_id;
  r.alpha_u = alpha_u;
  const int first = generation.tokens.front();
  r.compliant = first == tok_u || first == tok_d;
  r.hard_label = first == tok_u ? HardLabel::Utilitarian : first == tok_d ? HardLabel::Deontological : HardLabel::None;
  r.p_uti = dist[static_cast<std::size_t>(tok_u)];
  r.p_deo = dist[static_cast<std::size_t>(tok_d)];
  r.u_op = token_prob_ratio(dist, tok_u, tok_d);
  return r;
}

}  // namespace cdrsteer
