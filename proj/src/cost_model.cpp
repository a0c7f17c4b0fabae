#include "recursor/cost_model.hpp"

#include <cmath>

#include "recursor/errors.hpp"

namespace recursor {

std::vector<double> linear_capacity(int n_recursions) {
  if (n_recursions < 1) throw ConfigError("n_recursions must be >= 1");
  std::vector<double> out;
  for (int r = 1; r <= n_recursions; ++r)
    out.push_back(static_cast<double>(n_recursions - r + 1) / static_cast<double>(n_recursions));
  return out;
}

namespace {

std::vector<double> fractions(const ModelSpec& spec, const CostOptions& options) {
  const int nr = spec.n_recursions;
  if (options.capacity.empty()) return std::vector<double>(nr, 1.0);
  if (options.capacity.size() != static_cast<std::size_t>(nr))
    throw ConfigError("cost: capacity needs one entry per recursion (" + std::to_string(nr) + ")");
  for (double c : options.capacity)
    if (!(c > 0.0 && c <= 1.0)) throw ConfigError("cost: capacity fractions must lie in (0, 1]");
  return options.capacity;
}

std::size_t router_net_params(RouterArch arch, std::size_t d, std::size_t out) {
  if (arch == RouterArch::Linear) return d * out;
  const std::size_t h = arch == RouterArch::WideMLP ? 4 * d : d;
  return d * h + h * out;
}

struct BlockShape {
  std::size_t attention;
  std::size_t mlp;
  std::size_t norm;
  std::size_t lora;  // per unrolled layer
};

BlockShape block_shape(const ModelSpec& s, std::size_t rank) {
  const std::size_t d = s.d_model, q = s.q_dim(), kv = s.kv_dim(), f = s.d_inter;
  BlockShape b;
  b.attention = d * q + 2 * d * kv + q * d;
  b.mlp = 3 * d * f;
  b.norm = 2 * d;
  b.lora = rank * ((d + q) + 2 * (d + kv) + (q + d) + 2 * (d + f) + (f + d));
  return b;
}

// Fraction of tokens active at unrolled layer `ell`; the Middle ends see all.
double layer_fraction(const ModelSpec& spec, const std::vector<double>& frac, int ell) {
  const LayerSlot slot = layer_slot(spec, ell);
  if (slot.depth < 1 || slot.depth > spec.n_recursions) return 1.0;
  return frac[slot.depth - 1];
}

}  // namespace

ParamBreakdown count_params(const ModelSpec& spec, const CostOptions& options) {
  spec.validate();
  ParamBreakdown p;
  const BlockShape b = block_shape(spec, options.lora_rank);
  p.blocks = static_cast<std::size_t>(spec.unique_blocks());
  p.per_block = b.attention + b.mlp + b.norm;
  p.attention = b.attention * p.blocks;
  p.mlp = b.mlp * p.blocks;
  p.norm = b.norm * p.blocks + spec.d_model;  // plus the final norm
  p.embedding = spec.vocab * spec.d_model;
  p.head = spec.tie_embeddings ? 0 : spec.d_model * spec.vocab;
  p.lora = b.lora * static_cast<std::size_t>(spec.n_layers);
  if (options.router) {
    const auto& rc = *options.router;
    const std::size_t nr = static_cast<std::size_t>(spec.n_recursions);
    if (rc.kind == RouterKind::ExpertChoice) {
      p.router = nr * router_net_params(rc.arch, spec.d_model, 1);
      if (rc.aux_mode == AuxMode::AuxRouter) p.router *= 2;
    } else {
      p.router = router_net_params(rc.arch, spec.d_model, nr);
    }
  }
  return p;
}

FlopBreakdown forward_flops(const ModelSpec& spec, std::size_t seq_len, const CostOptions& options) {
  spec.validate();
  if (seq_len == 0) throw ConfigError("cost: seq_len must be positive");
  const auto frac = fractions(spec, options);
  const BlockShape b = block_shape(spec, options.lora_rank);
  const double T = static_cast<double>(seq_len);
  const double pair_flops = 4.0 * static_cast<double>(spec.n_heads * spec.d_head);
  FlopBreakdown f;
  f.seq_len = seq_len;
  for (double c : frac) f.depth_tokens.push_back(c * T);
  for (int ell = 0; ell < spec.n_layers; ++ell) {
    const double a = layer_fraction(spec, frac, ell) * T;
    f.linear += 2.0 * static_cast<double>(b.attention + b.mlp) * a;
    f.lora += 2.0 * static_cast<double>(b.lora) * a;
    // Causal pairs: a(a+1)/2 among active tokens, or a queries over the full prefix.
    const double pairs = options.kv_mode == KVMode::RecursiveShare ? a * (T + 1.0) / 2.0 : a * (a + 1.0) / 2.0;
    f.attention += pair_flops * pairs;
  }
  if (options.router) {
    const auto& rc = *options.router;
    const auto nr = static_cast<std::size_t>(spec.n_recursions);
    if (rc.kind == RouterKind::ExpertChoice) {
      const double per = 2.0 * static_cast<double>(router_net_params(rc.arch, spec.d_model, 1));
      const double nets = rc.aux_mode == AuxMode::AuxRouter ? 2.0 : 1.0;
      // Step r scores the tokens that survived step r - 1.
      for (std::size_t r = 0; r < nr; ++r) f.router += nets * per * (r == 0 ? T : f.depth_tokens[r - 1]);
    } else {
      f.router = 2.0 * static_cast<double>(router_net_params(rc.arch, spec.d_model, nr)) * T;
    }
  }
  if (options.count_head) f.head = 2.0 * static_cast<double>(spec.d_model * spec.vocab) * T;
  if (!options.count_adapters) {
    f.router = 0.0;
    f.lora = 0.0;
  }
  return f;
}

double training_flops(const ModelSpec& spec, std::size_t seq_len, double tokens, const CostOptions& options) {
  if (!(tokens >= 0.0)) throw ConfigError("cost: token count must be non-negative");
  return 3.0 * forward_flops(spec, seq_len, options).per_token() * tokens;
}

std::vector<std::size_t> cached_lengths(const ModelSpec& spec, std::size_t seq_len, const CostOptions& options) {
  const auto frac = fractions(spec, options);
  std::vector<std::size_t> out;
  for (double c : frac)
    out.push_back(static_cast<std::size_t>(std::floor(c * static_cast<double>(seq_len) + 1e-9)));
  return out;
}

namespace {

// Cached entries summed over unrolled layers, with per-depth lengths from `lengths`.
template <typename Len>
double cache_entries(const ModelSpec& spec, double seq_len, KVMode mode, bool routed, const Len& lengths) {
  double entries = 0.0;
  for (int ell = 0; ell < spec.n_layers; ++ell) {
    const LayerSlot slot = layer_slot(spec, ell);
    if (slot.depth < 1 || slot.depth > spec.n_recursions) {
      entries += seq_len;
      continue;
    }
    switch (mode) {
      case KVMode::PerDepth:
      case KVMode::RecursionWise:
        entries += mode == KVMode::PerDepth && !routed ? seq_len : static_cast<double>(lengths[slot.depth - 1]);
        break;
      case KVMode::RecursiveShare:
        // Only the first recursion writes; deeper ones reuse it.
        if (slot.depth == 1) entries += seq_len;
        break;
    }
  }
  return entries;
}

}  // namespace

std::size_t kv_bytes(const ModelSpec& spec, std::size_t seq_len, std::size_t bytes_per_element,
                     const CostOptions& options) {
  spec.validate();
  const auto lengths = cached_lengths(spec, seq_len, options);
  const auto entries = static_cast<std::size_t>(cache_entries(
      spec, static_cast<double>(seq_len), options.kv_mode, !options.capacity.empty(), lengths));
  return 2 * spec.kv_dim() * entries * bytes_per_element;
}

std::size_t max_batch(const ModelSpec& spec, std::size_t seq_len, std::size_t bytes_per_element,
                      double budget_bytes, const CostOptions& options) {
  spec.validate();
  const double params = static_cast<double>(count_params(spec, options).total() * bytes_per_element);
  const double T = static_cast<double>(seq_len);
  std::vector<double> expected;
  for (double c : fractions(spec, options)) expected.push_back(c * T);
  const double per_seq = 2.0 * static_cast<double>(spec.kv_dim() * bytes_per_element) *
                         cache_entries(spec, T, options.kv_mode, !options.capacity.empty(), expected);
  if (budget_bytes <= params || per_seq <= 0.0) return 0;
  return static_cast<std::size_t>(std::floor((budget_bytes - params) / per_seq));
}

}  // namespace recursor
