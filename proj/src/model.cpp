#include "recursor/model.hpp"

#include <algorithm>
#include <cmath>

#include "recursor/errors.hpp"
#include "recursor/ops.hpp"

namespace recursor {

std::string to_string(ShareStrategy s) {
  switch (s) {
    case ShareStrategy::None:
      return "none";
    case ShareStrategy::Cycle:
      return "cycle";
    case ShareStrategy::Sequence:
      return "sequence";
    case ShareStrategy::MiddleCycle:
      return "middle_cycle";
    case ShareStrategy::MiddleSequence:
      return "middle_sequence";
  }
  return "?";
}

ShareStrategy share_strategy_from_string(const std::string& name) {
  if (name == "none") return ShareStrategy::None;
  if (name == "cycle") return ShareStrategy::Cycle;
  if (name == "sequence") return ShareStrategy::Sequence;
  if (name == "middle_cycle") return ShareStrategy::MiddleCycle;
  if (name == "middle_sequence") return ShareStrategy::MiddleSequence;
  throw ConfigError("unknown share strategy '" + name + "'");
}

void ModelSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("model." + field + ": " + why);
  };
  if (n_layers < 1) fail("n_layers", "must be >= 1");
  if (n_recursions < 1) fail("n_recursions", "must be >= 1");
  if (d_model == 0) fail("d_model", "must be positive");
  if (n_heads == 0) fail("n_heads", "must be positive");
  if (n_kv_heads == 0) fail("n_kv_heads", "must be positive");
  if (n_heads % n_kv_heads != 0) fail("n_heads", "must be divisible by n_kv_heads");
  if (d_head == 0 || d_head % 2 != 0) fail("d_head", "must be a positive even number");
  if (d_inter == 0) fail("d_inter", "must be positive");
  if (vocab == 0) fail("vocab", "must be positive");
  if (context_len == 0) fail("context_len", "must be positive");
  if (middle()) {
    if (n_layers < 3) fail("n_layers", "Middle sharing needs at least 3 layers");
    if ((n_layers - 2) % n_recursions != 0)
      fail("n_recursions", "must divide n_layers - 2 (" + std::to_string(n_layers - 2) +
                               ") for Middle sharing");
  } else if (n_layers % n_recursions != 0) {
    fail("n_recursions", "must divide n_layers (" + std::to_string(n_layers) + ")");
  }
}

int ModelSpec::unique_blocks() const {
  switch (share) {
    case ShareStrategy::None:
      return n_layers;
    case ShareStrategy::Cycle:
    case ShareStrategy::Sequence:
      return n_layers / n_recursions;
    case ShareStrategy::MiddleCycle:
    case ShareStrategy::MiddleSequence:
      return (n_layers - 2) / n_recursions + 2;
  }
  return n_layers;
}

int ModelSpec::recursion_width() const {
  return middle() ? (n_layers - 2) / n_recursions : n_layers / n_recursions;
}

int layer_index_map(const ModelSpec& spec, int ell) {
  spec.validate();
  const int L = spec.n_layers, nr = spec.n_recursions;
  if (ell < 0 || ell >= L) throw IndexError("layer_index_map: layer " + std::to_string(ell) + " outside [0," + std::to_string(L) + ")");
  switch (spec.share) {
    case ShareStrategy::None:
      return ell;
    case ShareStrategy::Cycle:
      return ell % (L / nr);
    case ShareStrategy::Sequence:
      return ell / nr;
    case ShareStrategy::MiddleCycle:
    case ShareStrategy::MiddleSequence: {
      const int inner = (L - 2) / nr;
      if (ell == 0) return 0;
      if (ell == L - 1) return inner + 1;
      const int m = ell - 1;
      return (spec.share == ShareStrategy::MiddleCycle ? m % inner : m / nr) + 1;
    }
  }
  return ell;
}

std::vector<int> unrolled_blocks(const ModelSpec& spec) {
  std::vector<int> out(spec.n_layers);
  for (int ell = 0; ell < spec.n_layers; ++ell) out[ell] = layer_index_map(spec, ell);
  return out;
}

LayerSlot layer_slot(const ModelSpec& spec, int ell) {
  const int w = spec.recursion_width();
  if (spec.middle()) {
    if (ell == 0) return {0, 0};
    if (ell == spec.n_layers - 1) return {spec.n_recursions + 1, 0};
    return {(ell - 1) / w + 1, (ell - 1) % w};
  }
  return {ell / w + 1, ell % w};
}

std::vector<int> recursion_layers(const ModelSpec& spec, int r) {
  if (r < 1 || r > spec.n_recursions) throw IndexError("recursion step out of range");
  const int w = spec.recursion_width();
  const int first = (spec.middle() ? 1 : 0) + (r - 1) * w;
  std::vector<int> out(w);
  for (int i = 0; i < w; ++i) out[i] = first + i;
  return out;
}

std::vector<int> stage_layers(const ModelSpec& spec, int d) {
  auto layers = recursion_layers(spec, d);
  if (spec.middle()) {
    if (d == 1) layers.insert(layers.begin(), 0);
    if (d == spec.n_recursions) layers.push_back(spec.n_layers - 1);
  }
  return layers;
}

std::vector<std::pair<std::string, Tensor*>> BlockWeights::named() {
  return {{"attn_norm", &attn_norm}, {"wq", &wq},         {"wk", &wk},
          {"wv", &wv},               {"wo", &wo},         {"ffn_norm", &ffn_norm},
          {"w_gate", &w_gate},       {"w_up", &w_up},     {"w_down", &w_down}};
}

std::vector<std::pair<std::string, const Tensor*>> BlockWeights::named() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [n, t] : const_cast<BlockWeights*>(this)->named()) out.emplace_back(n, t);
  return out;
}

Tensor& BlockWeights::linear(const std::string& name) {
  for (auto& [n, t] : named())
    if (n == name) return *t;
  throw IndexError("unknown block tensor '" + name + "'");
}

const Tensor& BlockWeights::linear(const std::string& name) const {
  return const_cast<BlockWeights*>(this)->linear(name);
}

std::string lora_tensor_name(const std::string& linear, bool down, int layer) {
  return "lora." + linear + (down ? ".down" : ".up") + ".depth" + std::to_string(layer);
}

std::vector<std::pair<std::string, Tensor>> ModelWeights::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embedding", embedding);
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (const auto& [n, t] : blocks[b].named())
      out.emplace_back("blocks." + std::to_string(b) + "." + n, *t);
  out.emplace_back("final_norm", final_norm);
  if (head.defined()) out.emplace_back("head", head);
  for (const auto& [key, pair] : lora) {
    if (pair.rank() == 0) continue;
    out.emplace_back(lora_tensor_name(key.second, true, key.first), pair.down);
    out.emplace_back(lora_tensor_name(key.second, false, key.first), pair.up);
  }
  return out;
}

std::vector<Tensor> ModelWeights::parameters() const {
  std::vector<Tensor> out;
  for (auto& [n, t] : named_parameters()) out.push_back(t);
  return out;
}

namespace {

Tensor deep_copy(const Tensor& t) {
  if (!t.defined()) return t;
  Tensor c = t.detach();
  c.set_requires_grad(t.requires_grad());
  return c;
}

Tensor normal_matrix(Rng& rng, std::size_t rows, std::size_t cols, double std) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal(0.0, std);
  return Tensor::from({rows, cols}, std::move(v)).set_requires_grad();
}

}  // namespace

ModelWeights ModelWeights::clone() const {
  ModelWeights w;
  w.embedding = deep_copy(embedding);
  w.final_norm = deep_copy(final_norm);
  w.head = deep_copy(head);
  w.lora_scale = lora_scale;
  for (const auto& b : blocks) {
    BlockWeights nb;
    auto src = b.named();
    auto dst = nb.named();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = deep_copy(*src[i].second);
    w.blocks.push_back(std::move(nb));
  }
  for (const auto& [k, p] : lora) w.lora[k] = LoraPair{deep_copy(p.down), deep_copy(p.up)};
  return w;
}

ModelWeights init_weights(const ModelSpec& spec, Rng& rng, double init_std) {
  spec.validate();
  const std::size_t d = spec.d_model;
  ModelWeights w;
  w.embedding = normal_matrix(rng, spec.vocab, d, init_std);
  for (int b = 0; b < spec.unique_blocks(); ++b) {
    BlockWeights bw;
    bw.attn_norm = Tensor::full({d}, 1.0).set_requires_grad();
    bw.wq = normal_matrix(rng, d, spec.q_dim(), init_std);
    bw.wk = normal_matrix(rng, d, spec.kv_dim(), init_std);
    bw.wv = normal_matrix(rng, d, spec.kv_dim(), init_std);
    bw.wo = normal_matrix(rng, spec.q_dim(), d, init_std);
    bw.ffn_norm = Tensor::full({d}, 1.0).set_requires_grad();
    bw.w_gate = normal_matrix(rng, d, spec.d_inter, init_std);
    bw.w_up = normal_matrix(rng, d, spec.d_inter, init_std);
    bw.w_down = normal_matrix(rng, spec.d_inter, d, init_std);
    w.blocks.push_back(std::move(bw));
  }
  w.final_norm = Tensor::full({d}, 1.0).set_requires_grad();
  if (!spec.tie_embeddings) w.head = normal_matrix(rng, d, spec.vocab, init_std);
  return w;
}

Model::Model(ModelSpec spec, ModelWeights weights) : spec_(spec), weights_(std::move(weights)) {
  spec_.validate();
  if (weights_.blocks.size() != static_cast<std::size_t>(spec_.unique_blocks()))
    throw ConfigError("model: weights hold " + std::to_string(weights_.blocks.size()) +
                      " blocks, sharing strategy needs " + std::to_string(spec_.unique_blocks()));
  if (!weights_.embedding.defined() || weights_.embedding.shape() != Shape{spec_.vocab, spec_.d_model})
    throw DimensionError("model: embedding must be [vocab x d_model]");
  if (!spec_.tie_embeddings && !weights_.head.defined())
    throw ConfigError("model: untied head missing");
}

Model Model::random(const ModelSpec& spec, Rng& rng, double init_std) {
  return Model(spec, init_weights(spec, rng, init_std));
}

KVCacheBank Model::make_cache(KVMode mode) const {
  return KVCacheBank(mode, spec_.n_recursions, spec_.kv_dim(), spec_.recursion_width());
}

Tensor Model::embed(std::span<const int> ids) const { return embedding(weights_.embedding, ids); }

Tensor Model::linear(int ell, const BlockWeights& block, const char* name, const Tensor& x) const {
  Tensor out = matmul(x, block.linear(name));
  if (!weights_.lora.empty()) {
    auto it = weights_.lora.find({ell, name});
    if (it != weights_.lora.end() && it->second.rank() > 0) {
      Tensor delta = matmul(matmul(x, it->second.down), it->second.up);
      if (weights_.lora_scale != 1.0) delta = scale(delta, weights_.lora_scale);
      out = add(out, delta);
    }
  }
  return out;
}

std::pair<Tensor, Tensor> Model::layer_kv(int ell, const Tensor& x,
                                          std::span<const int> positions) const {
  const BlockWeights& b = weights_.blocks[layer_index_map(spec_, ell)];
  const Tensor h = rmsnorm(x, b.attn_norm);
  Tensor k = rope(linear(ell, b, "wk", h), positions, static_cast<int>(spec_.n_kv_heads));
  Tensor v = linear(ell, b, "wv", h);
  return {k, v};
}

Tensor Model::run_layer(int ell, const Tensor& x, std::span<const int> positions,
                        KVCacheBank& bank, int slot) const {
  const BlockWeights& b = weights_.blocks[layer_index_map(spec_, ell)];
  const LayerSlot ls = layer_slot(spec_, ell);
  const int max_pos = *std::max_element(positions.begin(), positions.end());
  const Tensor h = rmsnorm(x, b.attn_norm);
  const Tensor q = rope(linear(ell, b, "wq", h), positions, static_cast<int>(spec_.n_heads));
  if (bank.storage_depth(ls.depth) == ls.depth) {
    Tensor k = rope(linear(ell, b, "wk", h), positions, static_cast<int>(spec_.n_kv_heads));
    Tensor v = linear(ell, b, "wv", h);
    bank.append_rows(ls.depth, ls.sublayer, slot, positions, k, v);
  }
  const KVGathered kv = bank.gather(ls.depth, slot, max_pos, ls.sublayer);
  const Tensor attn = masked_attention(q, kv.keys, kv.values, positions, kv.positions,
                                       static_cast<int>(spec_.n_heads),
                                       static_cast<int>(spec_.n_kv_heads));
  const Tensor mid = add(x, linear(ell, b, "wo", attn));
  const Tensor h2 = rmsnorm(mid, b.ffn_norm);
  const Tensor ffn = mul(silu(linear(ell, b, "w_gate", h2)), linear(ell, b, "w_up", h2));
  return add(mid, linear(ell, b, "w_down", ffn));
}

Tensor Model::run_layers(std::span<const int> layers, Tensor x, std::span<const int> positions,
                         KVCacheBank& bank, int slot) const {
  for (int ell : layers) x = run_layer(ell, x, positions, bank, slot);
  return x;
}

Tensor Model::run_stage(int depth, const Tensor& x, std::span<const int> positions,
                        KVCacheBank& bank, int slot) const {
  return run_layers(stage_layers(spec_, depth), x, positions, bank, slot);
}

Tensor Model::head_logits(const Tensor& hidden) const {
  const Tensor normed = rmsnorm(hidden, weights_.final_norm);
  if (spec_.tie_embeddings) return matmul(normed, transpose(weights_.embedding));
  return matmul(normed, weights_.head);
}

Tensor intermediate_logits(const Model& model, const Tensor& hidden_at_depth) {
  return model.head_logits(hidden_at_depth);
}

namespace {

std::vector<int> pick(std::span<const int> values, const std::vector<int>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = values[idx[i]];
  return out;
}

Tensor rows_of_vector(const Tensor& v, const std::vector<int>& idx) {
  return reshape(gather_rows(reshape(v, {v.numel(), 1}), idx), {idx.size()});
}

}  // namespace

ForwardResult Model::forward(std::span<const int> ids, const ForwardOptions& options) const {
  if (ids.empty()) throw DimensionError("forward: empty token sequence");
  const int T = static_cast<int>(ids.size());
  if (options.position_offset < 0 ||
      static_cast<std::size_t>(options.position_offset + T) > spec_.context_len)
    throw LengthError("forward: positions up to " + std::to_string(options.position_offset + T - 1) +
                      " exceed context length " + std::to_string(spec_.context_len));
  std::vector<int> positions(T);
  for (int i = 0; i < T; ++i) positions[i] = options.position_offset + i;

  KVCacheBank* bank = options.cache;
  KVCacheBank temp = make_cache(options.router ? KVMode::RecursionWise : KVMode::PerDepth);
  if (!bank) bank = &temp;
  if (bank->kv_dim() != spec_.kv_dim() || bank->n_recursions() != spec_.n_recursions ||
      bank->sublayers() != spec_.recursion_width())
    throw CacheError("forward: cache geometry does not match the model");
  const int first_depth = spec_.middle() ? 0 : 1;
  if (bank->last_position(first_depth, options.slot) >= options.position_offset)
    throw CacheError("forward: cache already holds position " +
                     std::to_string(bank->last_position(first_depth, options.slot)) +
                     " for slot " + std::to_string(options.slot));

  ForwardResult out;
  out.trace.sample_id = options.sample_id;
  out.trace.n_tokens = T;
  out.trace.n_recursions = spec_.n_recursions;
  Tensor h = embed(ids);

  if (!options.router) {
    for (int d = 1; d <= spec_.n_recursions; ++d) {
      h = run_stage(d, h, positions, *bank, options.slot);
      out.stage_hidden.push_back(h);
    }
  } else {
    const Router& router = *options.router;
    if (router.n_recursions() != spec_.n_recursions || router.d_model() != spec_.d_model)
      throw ConfigError("forward: router geometry does not match the model");
    out.trace.kind = router.config().kind;
    if (spec_.middle()) h = run_layer(0, h, positions, *bank, options.slot);
    if (router.config().kind == RouterKind::ExpertChoice)
      forward_expert_choice(h, positions, router, options.route_mode, *bank, options.slot, out);
    else
      forward_token_choice(h, positions, router, *bank, options.slot, out);
    if (spec_.middle()) {
      h = run_layer(spec_.n_layers - 1, h, positions, *bank, options.slot);
      out.stage_hidden.back() = h;
    }
  }
  out.logits = head_logits(h);
  return out;
}

void Model::forward_expert_choice(Tensor& h, std::span<const int> positions, const Router& router,
                                  RouteMode mode, KVCacheBank& bank, int slot,
                                  ForwardResult& out) const {
  const int T = static_cast<int>(positions.size());
  const int nr = spec_.n_recursions;
  const auto& cfg = router.config();
  const auto capacity = capacity_schedule(nr, T);
  // Single-token decode cannot honour fractional capacities; only the threshold applies.
  const bool cap_applies = T >= nr;
  std::vector<int> active(T);
  for (int i = 0; i < T; ++i) active[i] = i;
  out.trace.scores.assign(nr, std::vector<double>(T, std::nan("")));
  out.trace.selected.assign(nr, std::vector<bool>(T, false));
  out.trace.inference_selected.assign(nr, std::vector<bool>(T, false));

  for (int r = 1; r <= nr; ++r) {
    RoutedStep step;
    step.active = active;
    std::vector<int> chosen;
    if (!active.empty()) {
      const Tensor x = gather_rows(h, active);
      step.logits = router.logits(r, x);
      step.scores = reshape(router.activate(step.logits), {active.size()});
      const auto g = step.scores.data();
      std::vector<double> gv(g.begin(), g.end());
      std::vector<double> infer_scores = gv;
      if (router.has_aux_router()) {
        Tensor aux_in = x.detach();
        step.aux_scores = reshape(router.activate(router.aux_logits(r, aux_in)), {active.size()});
        infer_scores.assign(step.aux_scores.data().begin(), step.aux_scores.data().end());
      }
      std::vector<bool> by_threshold(active.size());
      for (std::size_t i = 0; i < active.size(); ++i)
        by_threshold[i] = r == 1 || infer_scores[i] > cfg.select_threshold;
      if (mode == RouteMode::Train) {
        const int k = std::min<int>(capacity[r - 1], static_cast<int>(active.size()));
        step.selected = expert_choice_select(gv, k);
      } else {
        step.selected = by_threshold;
        const auto n_sel = std::count(by_threshold.begin(), by_threshold.end(), true);
        if (cap_applies && n_sel > capacity[r - 1])
          step.selected = expert_choice_select(infer_scores, by_threshold, capacity[r - 1]);
      }
      for (std::size_t i = 0; i < active.size(); ++i) {
        out.trace.scores[r - 1][active[i]] = gv[i];
        out.trace.inference_selected[r - 1][active[i]] = by_threshold[i];
        if (step.selected[i]) {
          chosen.push_back(static_cast<int>(i));
          out.trace.selected[r - 1][active[i]] = true;
        }
      }
    }
    if (!chosen.empty()) {
      const std::vector<int> rows = pick(active, chosen);
      const std::vector<int> pos = pick(positions, rows);
      const Tensor x_sel = gather_rows(h, rows);
      const Tensor g_sel = rows_of_vector(step.scores, chosen);
      const Tensor y = run_layers(recursion_layers(spec_, r), x_sel, pos, bank, slot);
      const Tensor upd = add(scale_rows(y, scale(g_sel, cfg.alpha)), x_sel);
      h = scatter_rows(h, rows, upd);
      active = rows;
    } else {
      active.clear();
    }
    out.stage_hidden.push_back(h);
    out.steps.push_back(std::move(step));
  }
}

void Model::forward_token_choice(Tensor& h, std::span<const int> positions, const Router& router,
                                 KVCacheBank& bank, int slot, ForwardResult& out) const {
  const int T = static_cast<int>(positions.size());
  const int nr = spec_.n_recursions;
  const Tensor h1 = h;
  out.router_logits = router.logits(1, h1);
  out.router_probs = router.activate(out.router_logits);
  const Tensor g = scale(out.router_probs, router.config().alpha);
  const auto depths = token_choice_assign(g.data(), nr, router.biases());
  out.trace.depths = depths;
  out.trace.probs.assign(T, std::vector<double>(nr));
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < nr; ++j) out.trace.probs[t][j] = out.router_probs.at(t, j);
  out.trace.scores.assign(nr, std::vector<double>(T, std::nan("")));
  out.trace.selected.assign(nr, std::vector<bool>(T, false));

  for (int r = 1; r <= nr; ++r) {
    std::vector<int> rows;
    for (int t = 0; t < T; ++t)
      if (depths[t] >= r) rows.push_back(t);
    if (!rows.empty()) {
      const std::vector<int> pos = pick(positions, rows);
      const Tensor x = gather_rows(h, rows);
      const Tensor g_rows = gather_rows(g, rows);
      const Tensor gr = select_column(g_rows, static_cast<std::size_t>(r - 1));
      const Tensor y = run_layers(recursion_layers(spec_, r), x, pos, bank, slot);
      Tensor next = scale_rows(y, gr);
      std::vector<double> finishing(rows.size());
      bool any = false;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        finishing[i] = depths[rows[i]] == r ? 1.0 : 0.0;
        any = any || finishing[i] != 0.0;
        out.trace.scores[r - 1][rows[i]] = g_rows.at(i, r - 1);
        out.trace.selected[r - 1][rows[i]] = true;
      }
      if (any) next = add(next, scale_rows(gather_rows(h1, rows), Tensor::vector(finishing)));
      h = scatter_rows(h, rows, next);
    }
    out.stage_hidden.push_back(h);
  }
}

Model explicit_unroll(const Model& model) {
  ModelSpec flat = model.spec();
  flat.share = ShareStrategy::None;
  flat.n_recursions = 1;
  const ModelWeights src = model.weights().clone();
  ModelWeights w;
  w.embedding = src.embedding;
  w.final_norm = src.final_norm;
  w.head = src.head;
  w.lora_scale = src.lora_scale;
  for (int ell = 0; ell < flat.n_layers; ++ell) {
    const BlockWeights& b = src.blocks[layer_index_map(model.spec(), ell)];
    BlockWeights copy;
    auto from = b.named();
    auto to = copy.named();
    for (std::size_t i = 0; i < from.size(); ++i) *to[i].second = deep_copy(*from[i].second);
    w.blocks.push_back(std::move(copy));
  }
  w.lora = src.lora;
  return Model(flat, std::move(w));
}

std::size_t count_parameters(const ModelWeights& weights) {
  std::size_t n = 0;
  for (const auto& [name, t] : weights.named_parameters()) n += t.numel();
  return n;
}

}  // namespace recursor
