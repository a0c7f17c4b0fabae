#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "recursor/kv_cache.hpp"
#include "recursor/model.hpp"
#include "recursor/routing.hpp"

namespace recursor {

struct CostOptions {
  KVMode kv_mode = KVMode::PerDepth;
  // Fraction of tokens active at each recursion depth; empty means all ones.
  // Token-choice routing is costed as perfectly balanced, i.e. the same fractions.
  std::vector<double> capacity;
  std::optional<RouterConfig> router;
  std::size_t lora_rank = 0;
  // Router and LoRA FLOPs; off for parity with totals that ignore them.
  bool count_adapters = true;
  // Classifier FLOPs (the embedding lookup is free).
  bool count_head = false;
};

// (N_r - r + 1) / N_r for r = 1..N_r.
std::vector<double> linear_capacity(int n_recursions);

struct ParamBreakdown {
  std::size_t embedding = 0;
  std::size_t head = 0;  // zero when tied to the embedding
  std::size_t attention = 0;
  std::size_t mlp = 0;
  std::size_t norm = 0;
  std::size_t router = 0;
  std::size_t lora = 0;
  std::size_t per_block = 0;
  std::size_t blocks = 0;  // unique blocks stored

  std::size_t non_embedding() const { return attention + mlp + norm + router + lora; }
  std::size_t total() const { return embedding + head + non_embedding(); }
};

// Unique stored parameters, from the model dimensions alone.
ParamBreakdown count_params(const ModelSpec& spec, const CostOptions& options = {});

struct FlopBreakdown {
  // Forward FLOPs for one sequence of `seq_len` tokens.
  double linear = 0.0;
  double attention = 0.0;
  double router = 0.0;
  double lora = 0.0;
  double head = 0.0;
  std::size_t seq_len = 0;
  // Active tokens at each recursion depth.
  std::vector<double> depth_tokens;

  double total() const { return linear + attention + router + lora + head; }
  double per_token() const { return seq_len ? total() / static_cast<double>(seq_len) : 0.0; }
};

// Linear layers cost 2 FLOPs per weight per active token. Attention counts
// Q.K^T and the value weighting over causal pairs only; keys at a depth are
// the tokens active there (per-depth, recursion-wise) or every token
// (recursive sharing). Norms and activations are omitted.
FlopBreakdown forward_flops(const ModelSpec& spec, std::size_t seq_len, const CostOptions& options = {});

// Forward plus backward (twice the forward) over `tokens` training tokens.
double training_flops(const ModelSpec& spec, std::size_t seq_len, double tokens,
                      const CostOptions& options = {});

// Active token count per depth for caching: floor(T * fraction).
std::vector<std::size_t> cached_lengths(const ModelSpec& spec, std::size_t seq_len,
                                        const CostOptions& options = {});

// Keys and values cached for one sequence across every unrolled layer.
std::size_t kv_bytes(const ModelSpec& spec, std::size_t seq_len, std::size_t bytes_per_element,
                     const CostOptions& options = {});

// floor((budget - parameter bytes) / per-sequence cache bytes); 0 when the
// parameters alone exceed the budget. Cache bytes use the expected per-depth
// lengths T * fraction, unrounded, as routing is costed perfectly balanced.
std::size_t max_batch(const ModelSpec& spec, std::size_t seq_len, std::size_t bytes_per_element,
                      double budget_bytes, const CostOptions& options = {});

}  // namespace recursor
