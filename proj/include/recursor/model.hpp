#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "recursor/kv_cache.hpp"
#include "recursor/rng.hpp"
#include "recursor/routing.hpp"
#include "recursor/tensor.hpp"

namespace recursor {

enum class ShareStrategy { None, Cycle, Sequence, MiddleCycle, MiddleSequence };

std::string to_string(ShareStrategy s);
ShareStrategy share_strategy_from_string(const std::string& name);

struct ModelSpec {
  int n_layers = 4;
  int n_recursions = 1;
  ShareStrategy share = ShareStrategy::None;
  std::size_t d_model = 8;
  std::size_t n_heads = 2;
  std::size_t n_kv_heads = 1;
  std::size_t d_head = 4;
  std::size_t d_inter = 16;
  std::size_t vocab = 32;
  std::size_t context_len = 64;
  bool tie_embeddings = true;

  // Throws ConfigError naming the offending field.
  void validate() const;
  bool middle() const {
    return share == ShareStrategy::MiddleCycle || share == ShareStrategy::MiddleSequence;
  }
  int unique_blocks() const;
  // Unrolled layers inside one recursion step (excluding the Middle first/last layers).
  int recursion_width() const;
  std::size_t q_dim() const { return n_heads * d_head; }
  std::size_t kv_dim() const { return n_kv_heads * d_head; }
};

// Unique-block id used by unrolled layer `ell`.
int layer_index_map(const ModelSpec& spec, int ell);
std::vector<int> unrolled_blocks(const ModelSpec& spec);

// Where layer `ell` keeps its keys: recursion depth 1..N_r (0 and N_r+1 for
// the Middle first/last layers) and its index inside the recursion block.
struct LayerSlot {
  int depth = 0;
  int sublayer = 0;
};
LayerSlot layer_slot(const ModelSpec& spec, int ell);

// Unrolled layers of recursion step r (1-based), without the Middle ends.
std::vector<int> recursion_layers(const ModelSpec& spec, int r);
// Layers executed by exit stage d: stage 1 adds the Middle first layer, stage
// N_r adds the Middle last layer.
std::vector<int> stage_layers(const ModelSpec& spec, int d);

inline constexpr const char* kLinearNames[] = {"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};

struct BlockWeights {
  Tensor attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down;

  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  Tensor& linear(const std::string& name);
  const Tensor& linear(const std::string& name) const;
};

// Low-rank delta x -> (x . down) . up, down [in x r], up [r x out].
struct LoraPair {
  Tensor down;
  Tensor up;
  std::size_t rank() const { return down.defined() ? down.dim(1) : 0; }
};

struct ModelWeights {
  Tensor embedding;   // [vocab x d_model]
  std::vector<BlockWeights> blocks;
  Tensor final_norm;  // [d_model]
  Tensor head;        // [d_model x vocab]; undefined when tied to the embedding
  // Keyed by (unrolled layer, linear name).
  std::map<std::pair<int, std::string>, LoraPair> lora;
  double lora_scale = 1.0;

  // Stable order used by checkpoints and optimizers.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  // Deep copy with fresh storage; requires_grad flags are preserved.
  ModelWeights clone() const;
};

// "lora.<linear>.<down|up>.depth<unrolled layer>"
std::string lora_tensor_name(const std::string& linear, bool down, int layer);

ModelWeights init_weights(const ModelSpec& spec, Rng& rng, double init_std = 0.02);

enum class RouteMode { Train, Infer };

struct ForwardOptions {
  const Router* router = nullptr;
  RouteMode route_mode = RouteMode::Train;
  // When null a temporary bank is used (recursion-wise with a router,
  // per-depth without).
  KVCacheBank* cache = nullptr;
  int slot = 0;
  int position_offset = 0;
  int sample_id = 0;
};

// Expert-choice bookkeeping for one recursion step.
struct RoutedStep {
  std::vector<int> active;        // token indices scored at this step
  Tensor scores;                  // activated scores of active tokens, [n]
  Tensor logits;                  // raw router logits, [n x 1]
  Tensor aux_scores;              // auxiliary router scores on detached inputs, [n]
  std::vector<bool> selected;     // over `active`
};

struct ForwardResult {
  Tensor logits;                     // [T x V]
  std::vector<Tensor> stage_hidden;  // hidden after each exit stage, N_r entries
  std::vector<RoutedStep> steps;     // expert-choice only
  Tensor router_logits;              // token-choice [T x N_r]
  Tensor router_probs;               // token-choice activated scores [T x N_r]
  RoutingTrace trace;
};

class Model {
 public:
  Model() = default;
  Model(ModelSpec spec, ModelWeights weights);
  static Model random(const ModelSpec& spec, Rng& rng, double init_std = 0.02);

  const ModelSpec& spec() const { return spec_; }
  const ModelWeights& weights() const { return weights_; }
  ModelWeights& weights() { return weights_; }

  KVCacheBank make_cache(KVMode mode) const;

  ForwardResult forward(std::span<const int> ids, const ForwardOptions& options = {}) const;

  Tensor embed(std::span<const int> ids) const;
  Tensor run_layer(int ell, const Tensor& x, std::span<const int> positions, KVCacheBank& bank,
                   int slot) const;
  Tensor run_layers(std::span<const int> layers, Tensor x, std::span<const int> positions,
                    KVCacheBank& bank, int slot) const;
  Tensor run_stage(int depth, const Tensor& x, std::span<const int> positions, KVCacheBank& bank,
                   int slot) const;
  // Final norm and shared classifier on any hidden state.
  Tensor head_logits(const Tensor& hidden) const;
  // Rotated keys and values that layer `ell` would cache for rows `x`.
  std::pair<Tensor, Tensor> layer_kv(int ell, const Tensor& x, std::span<const int> positions) const;

 private:
  Tensor linear(int ell, const BlockWeights& block, const char* name, const Tensor& x) const;
  void forward_expert_choice(Tensor& h, std::span<const int> positions, const Router& router,
                             RouteMode mode, KVCacheBank& bank, int slot, ForwardResult& out) const;
  void forward_token_choice(Tensor& h, std::span<const int> positions, const Router& router,
                            KVCacheBank& bank, int slot, ForwardResult& out) const;

  ModelSpec spec_;
  ModelWeights weights_;
};

Tensor intermediate_logits(const Model& model, const Tensor& hidden_at_depth);

// Untied model (sharing None, one recursion) whose L blocks are copies of the
// blocks each unrolled layer resolves to.
Model explicit_unroll(const Model& model);

// Parameter count of the unique weights actually stored.
std::size_t count_parameters(const ModelWeights& weights);

}  // namespace recursor
