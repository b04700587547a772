#pragma once

// Deterministic decoder-only toy transformer with hook points.
//
// Architecture per layer (pre-norm, LLaMA style):
//   x  = RMSNorm(h)            -> causal multi-head attention -> z (H·d_h)
//   h' = h + z W_o
//   x' = RMSNorm(h')           -> m = SiLU(x' W_gate) ⊙ (x' W_up)
//   h''= h' + m W_down         (post-FFN residual)
// followed by a final RMSNorm and the unembedding W_out (d_model × V).
//
// Weights are drawn from cdrsteer::Rng, so (config, seed) fixes every bit.
//
// Planted models reserve the last four residual channels:
//   label_u, label_d  carry per-token synthetic framework labels,
//   out_u, out_d      are the output directions of the two indicator tokens.
// Random weights never read or write reserved channels; planted heads and
// FFN units are the only paths between them.

#include <array>
#include <bitset>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cdrsteer/linalg.hpp"

namespace cdrsteer {

enum class Framework { Utilitarian, Deontological };

inline constexpr std::array<Framework, 2> kFrameworks{Framework::Utilitarian, Framework::Deontological};

std::string_view framework_code(Framework f);  // "U" / "D"
Framework parse_framework(std::string_view code);
inline int framework_index(Framework f) { return f == Framework::Utilitarian ? 0 : 1; }

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 32;
  int d_ff = 64;
  int vocab = 100;
  std::uint64_t seed = 42;

  int d_head() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct PlantChannels {
  int label_u;
  int label_d;
  int out_u;
  int out_d;
  int n_free;  // channels [0, n_free) are unreserved

  int label(Framework f) const { return f == Framework::Utilitarian ? label_u : label_d; }
  int out(Framework f) const { return f == Framework::Utilitarian ? out_u : out_d; }
};

PlantChannels plant_channels(const ModelConfig& config);

struct FrameworkPlant {
  std::vector<std::vector<int>> heads;      // [layer] -> planted head indices
  std::vector<std::vector<int>> ffn_units;  // [layer] -> planted FFN unit indices
  int indicator_token = 0;

  bool operator==(const FrameworkPlant&) const = default;
};

struct PlantSpec {
  FrameworkPlant utilitarian;
  FrameworkPlant deontological;
  double signal = 1.0;      // planted head gain on its label channel
  double noise = 0.1;       // std of the planted head's free-channel value weights
  double ffn_scale = 0.1;   // W_up column = ffn_scale * v_e + noise
  double ffn_noise = 0.01;
  double head_gain = 0.2;   // planted head -> out channel
  double gate_gain = 1.0;   // out channel -> planted unit gate
  double down_gain = 0.05;   // planted unit -> out channel
  double out_gain = 2.0;    // norm of the indicator-token unembedding columns
  double anchor_gain = 2.0; // anchor token embedding on both out channels
  double label_scale = 4.0; // label value -> embedding magnitude
  std::vector<int> anchor;  // token ids closing every prompt
  int scenario_length = 4;

  const FrameworkPlant& of(Framework f) const {
    return f == Framework::Utilitarian ? utilitarian : deontological;
  }
  void validate(const ModelConfig& config) const;

  // Designed layout for a 4-layer, 4-head model (needs d_ff >= 40):
  //   layer 0  U heads {0}    D heads {1}    (no shared head)
  //   layer 1  U heads {1,2}  D heads {2,3}  units U 8..13, D 12..17 (J = 0.2)
  //   layer 2  U heads {1}    D heads {1}    identical units (J = 1)
  //   layer 3  U heads {0,3}  D heads {3}    disjoint units (J = 0)
  static PlantSpec standard(const ModelConfig& config);

  bool operator==(const PlantSpec&) const = default;
};

struct LayerWeights {
  Vector attn_norm;
  Vector ffn_norm;
  Matrix w_q, w_k, w_v;  // d_model × H·d_h
  Matrix w_o;            // H·d_h × d_model
  Matrix w_gate, w_up;   // d_model × d_ff
  Matrix w_down;         // d_ff × d_model
};

struct Model {
  ModelConfig config;
  std::optional<PlantSpec> plant;
  Matrix embedding;  // vocab × d_model
  std::vector<LayerWeights> layers;
  Vector final_norm;
  Matrix w_out;  // d_model × vocab
  // Synthetic per-token labels in [0, 1]; zero for non-scenario tokens and
  // for unplanted models.
  Vector token_label_u;
  Vector token_label_d;

  int d_head() const { return config.d_head(); }
  // FNV-1a over the bit patterns of all weights in a fixed order.
  std::uint64_t checksum() const;
};

Model build_model(const ModelConfig& config, const std::optional<PlantSpec>& plant = std::nullopt);

// ---------------------------------------------------------------------------
// Hooks

enum class HookKind { HeadOut, ConcatZ, FfnAct, ResidualPostFfn, FfnDownOut, NextTokenDist };

inline constexpr int kHookKindCount = 6;

std::string_view hook_kind_name(HookKind kind);
HookKind parse_hook_kind(std::string_view name);

class HookSet {
 public:
  HookSet() = default;
  HookSet(std::initializer_list<HookKind> kinds) {
    for (HookKind k : kinds) insert(k);
  }
  void insert(HookKind k) { bits_.set(static_cast<std::size_t>(k)); }
  bool contains(HookKind k) const { return bits_.test(static_cast<std::size_t>(k)); }
  bool empty() const { return bits_.none(); }

 private:
  std::bitset<kHookKindCount> bits_;
};

// Hooks are recorded at the final position of each forward pass. The output
// distribution is recorded with layer == n_layers.
struct HookRecord {
  int prompt_id = 0;
  int layer = 0;
  int step = 0;
  HookKind kind = HookKind::ResidualPostFfn;
  std::optional<int> head;  // 0-based; only for HeadOut
  Vector values;

  bool operator==(const HookRecord&) const = default;
};

std::size_t expected_hook_length(const ModelConfig& config, HookKind kind);

// JSON Lines, one record per line; `head` is 1-based or null.
void write_trace_jsonl(std::ostream& out, std::span<const HookRecord> records);
std::vector<HookRecord> read_trace_jsonl(std::istream& in);

// ---------------------------------------------------------------------------
// Interventions. Within a layer they act in this order at every position:
//   head masking and head-site DLC edits on z
//   masking deviation Δ (FfnGate) -> gated FFN overwrite
//   FFN down-output DLC edit
//   residual add, then residual DLC edit

enum class SteeringSite { ResidualPostFfn, FfnDownOutput, HeadOutput };

std::string_view steering_site_name(SteeringSite site);
SteeringSite parse_steering_site(std::string_view name);

// Zeroes the listed heads' blocks of z (plain ablation).
struct HeadMask {
  int layer = 0;
  std::vector<int> heads;
};

// Binary-control gate: Δ from masking `shared_heads`, spliced into `units`.
struct FfnGate {
  int layer = 0;
  std::vector<int> shared_heads;
  std::vector<int> units;
};

// Closed-form preference calibration of the state at `site`.
struct DlcEdit {
  int layer = 0;
  SteeringSite site = SteeringSite::ResidualPostFfn;
  int head = -1;  // HeadOutput only
  Vector u;
  Vector d;
  double alpha_u = 0.5;
  double k = 1.0;
  double eps_log = 1e-6;
};

struct ResidualAdd {
  int layer = 0;
  Vector delta;
};

using Intervention = std::variant<HeadMask, FfnGate, DlcEdit, ResidualAdd>;

// Throws std::invalid_argument when an intervention names a site, head, unit
// or vector length the model does not have.
void validate_interventions(const Model& model, std::span<const Intervention> interventions);

// One DLC application at the final position of a forward pass.
struct AuditEntry {
  int prompt_id = 0;
  int step = 0;
  int layer = 0;
  SteeringSite site = SteeringSite::ResidualPostFfn;
  int head = -1;
  double alpha_u = 0.0;
  double delta_norm = 0.0;
  double pre_gap = 0.0;   // s_U - s_D before the edit
  double post_gap = 0.0;  // after the edit
};

// softmax(s_U, s_D)[0] expressed through the gap s_U - s_D.
double softmax_u_from_gap(double gap);

struct StepContext {
  int prompt_id = 0;
  int step = 0;
};

struct ForwardResult {
  Vector next_token_dist;
  std::vector<HookRecord> trace;
  std::vector<AuditEntry> audit;
};

ForwardResult forward(const Model& model, std::span<const int> tokens, const HookSet& hooks = {},
                      std::span<const Intervention> interventions = {}, StepContext context = {});

struct GenerationResult {
  int prompt_id = 0;
  std::vector<int> tokens;         // generated tokens only
  std::vector<Vector> step_dists;  // next-token distribution per step
  std::vector<HookRecord> trace;
  std::vector<AuditEntry> audit;
};

// Greedy decoding; ties resolve to the lowest token id.
GenerationResult generate(const Model& model, std::span<const int> prompt, int max_steps,
                          const HookSet& hooks = {}, std::span<const Intervention> interventions = {},
                          int prompt_id = 0);

// RMS normalization with unit scale.
Vector rms_normalize(std::span<const double> x);

// φ(x W_gate) ⊙ (x W_up) for one layer.
Vector ffn_activation(std::span<const double> x, const LayerWeights& weights);

// ---------------------------------------------------------------------------
// Synthetic prompts

struct Prompt {
  int id = 0;
  std::vector<int> tokens;
  double label_u = 0.0;  // mean token label over scenario tokens
  double label_d = 0.0;
};

// `count` prompts of plant.scenario_length scenario tokens followed by the
// anchor sequence (4 random tokens and no anchor for unplanted models).
std::vector<Prompt> make_prompts(const Model& model, int count, std::uint64_t seed);

}  // namespace cdrsteer
