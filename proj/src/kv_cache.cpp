#include "recursor/kv_cache.hpp"

#include <algorithm>

#include "recursor/errors.hpp"
#include "recursor/ops.hpp"

namespace recursor {

std::string to_string(KVMode mode) {
  switch (mode) {
    case KVMode::PerDepth:
      return "per_depth";
    case KVMode::RecursionWise:
      return "recursion_wise";
    case KVMode::RecursiveShare:
      return "recursive_share";
  }
  return "?";
}

KVMode kv_mode_from_string(const std::string& name) {
  if (name == "per_depth") return KVMode::PerDepth;
  if (name == "recursion_wise") return KVMode::RecursionWise;
  if (name == "recursive_share") return KVMode::RecursiveShare;
  throw ConfigError("unknown kv mode '" + name + "'");
}

KVCacheBank::KVCacheBank(KVMode mode, int n_recursions, std::size_t kv_dim, int sublayers)
    : mode_(mode), n_recursions_(n_recursions), kv_dim_(kv_dim), sublayers_(sublayers) {
  if (n_recursions < 1) throw ConfigError("kv cache: n_recursions must be >= 1");
  if (kv_dim == 0) throw ConfigError("kv cache: kv_dim must be positive");
  if (sublayers < 1) throw ConfigError("kv cache: sublayers must be >= 1");
}

void KVCacheBank::check_depth(int depth, const char* op) const {
  if (depth < 0 || depth > n_recursions_ + 1)
    throw IndexError(std::string(op) + ": depth " + std::to_string(depth) + " outside [0," +
                     std::to_string(n_recursions_ + 1) + "]");
}

void KVCacheBank::check_write(int depth) const {
  if (mode_ == KVMode::RecursiveShare && depth > 1 && depth <= n_recursions_)
    throw ModeError("recursive sharing stores keys only at recursion 1 (write at depth " +
                    std::to_string(depth) + ")");
}

int KVCacheBank::storage_depth(int depth) const {
  if (mode_ == KVMode::RecursiveShare && depth > 1 && depth <= n_recursions_) return 1;
  return depth;
}

void KVCacheBank::append_rows(int depth, int sublayer, int slot, std::span<const int> positions,
                              const Tensor& keys, const Tensor& values) {
  check_depth(depth, "append");
  check_write(depth);
  if (sublayer < 0 || sublayer >= sublayers_) throw IndexError("append: sublayer out of range");
  const std::size_t n = positions.size();
  if (keys.rank() != 2 || values.rank() != 2 || keys.dim(0) != n || values.dim(0) != n ||
      keys.dim(1) != kv_dim_ || values.dim(1) != kv_dim_)
    throw DimensionError("append: expected [" + std::to_string(n) + "x" + std::to_string(kv_dim_) +
                         "] keys/values, got " + shape_str(keys.shape()) + " and " +
                         shape_str(values.shape()));
  if (n == 0) return;
  Store& store = stores_[{depth, sublayer, slot}];
  int last = store.last_position;
  for (int p : positions) {
    if (p <= last)
      throw OrderingError("append: position " + std::to_string(p) + " not after " +
                          std::to_string(last) + " (depth " + std::to_string(depth) + ", slot " +
                          std::to_string(slot) + ")");
    last = p;
  }
  store.chunks.push_back({keys, values, std::vector<int>(positions.begin(), positions.end())});
  store.last_position = last;
  store.entries += n;
}

void KVCacheBank::append(int depth, int slot, int position, std::span<const double> key,
                         std::span<const double> value, int sublayer) {
  const int pos[1] = {position};
  append_rows(depth, sublayer, slot, pos,
              Tensor::from({1, key.size()}, std::vector<double>(key.begin(), key.end())),
              Tensor::from({1, value.size()}, std::vector<double>(value.begin(), value.end())));
}

const KVCacheBank::Store* KVCacheBank::find(int depth, int sublayer, int slot) const {
  auto it = stores_.find({depth, sublayer, slot});
  return it == stores_.end() ? nullptr : &it->second;
}

KVGathered KVCacheBank::gather(int depth, int slot, int query_position, int sublayer) const {
  check_depth(depth, "gather");
  KVGathered own = gather_store(storage_depth(depth), sublayer, slot, query_position);
  if (!share_inactive_ || mode_ != KVMode::RecursionWise || depth < 2 || depth > n_recursions_)
    return own;
  // Positions skipped at this depth fall back to their recursion-1 entries.
  KVGathered base = gather_store(1, sublayer, slot, query_position);
  std::vector<std::pair<int, int>> order;  // (position, row in concat(own, base))
  std::size_t i = 0;
  for (std::size_t j = 0; j < base.positions.size(); ++j) {
    while (i < own.positions.size() && own.positions[i] < base.positions[j]) {
      order.emplace_back(own.positions[i], static_cast<int>(i));
      ++i;
    }
    if (i < own.positions.size() && own.positions[i] == base.positions[j]) continue;
    order.emplace_back(base.positions[j], static_cast<int>(own.positions.size() + j));
  }
  for (; i < own.positions.size(); ++i) order.emplace_back(own.positions[i], static_cast<int>(i));
  if (order.empty()) return own;
  std::vector<int> rows;
  KVGathered out;
  for (auto [p, r] : order) {
    out.positions.push_back(p);
    rows.push_back(r);
  }
  const Tensor ks[2] = {own.keys, base.keys};
  const Tensor vs[2] = {own.values, base.values};
  out.keys = gather_rows(concat_rows(ks), rows);
  out.values = gather_rows(concat_rows(vs), rows);
  return out;
}

KVGathered KVCacheBank::gather_store(int depth, int sublayer, int slot, int query_position) const {
  KVGathered out;
  auto it = stores_.find({depth, sublayer, slot});
  if (it == stores_.end() || it->second.entries == 0) {
    out.keys = Tensor::zeros({0, kv_dim_});
    out.values = Tensor::zeros({0, kv_dim_});
    return out;
  }
  Store& store = it->second;
  bool tracked = false;
  for (const auto& c : store.chunks) tracked = tracked || c.keys.requires_grad() || c.values.requires_grad();
  // Untracked chunks are merged once so repeated decode reads stay linear.
  if (!tracked && store.chunks.size() > 1) {
    std::vector<Tensor> ks, vs;
    std::vector<int> pos;
    for (const auto& c : store.chunks) {
      ks.push_back(c.keys);
      vs.push_back(c.values);
      pos.insert(pos.end(), c.positions.begin(), c.positions.end());
    }
    NoGradGuard guard;
    Chunk merged{concat_rows(ks), concat_rows(vs), std::move(pos)};
    store.chunks.clear();
    store.chunks.push_back(std::move(merged));
  }
  std::vector<Tensor> ks, vs;
  for (const auto& c : store.chunks) {
    ks.push_back(c.keys);
    vs.push_back(c.values);
    out.positions.insert(out.positions.end(), c.positions.begin(), c.positions.end());
  }
  Tensor k = concat_rows(ks);
  Tensor v = concat_rows(vs);
  const auto cut = std::upper_bound(out.positions.begin(), out.positions.end(), query_position);
  const std::size_t visible = static_cast<std::size_t>(cut - out.positions.begin());
  if (visible < out.positions.size()) {
    std::vector<int> rows(visible);
    for (std::size_t i = 0; i < visible; ++i) rows[i] = static_cast<int>(i);
    out.positions.resize(visible);
    if (visible == 0) {
      out.keys = Tensor::zeros({0, kv_dim_});
      out.values = Tensor::zeros({0, kv_dim_});
      return out;
    }
    k = gather_rows(k, rows);
    v = gather_rows(v, rows);
  }
  out.keys = k;
  out.values = v;
  return out;
}

int KVCacheBank::last_position(int depth, int slot, int sublayer) const {
  const Store* s = find(storage_depth(depth), sublayer, slot);
  return s ? s->last_position : -1;
}

std::size_t KVCacheBank::entries(int depth) const {
  std::size_t n = 0;
  for (const auto& [key, store] : stores_)
    if (std::get<0>(key) == depth) n += store.entries;
  return n;
}

std::size_t KVCacheBank::entries(int depth, int sublayer, int slot) const {
  const Store* s = find(depth, sublayer, slot);
  return s ? s->entries : 0;
}

std::size_t KVCacheBank::total_entries() const {
  std::size_t n = 0;
  for (const auto& [key, store] : stores_) n += store.entries;
  return n;
}

std::size_t KVCacheBank::bytes() const { return total_entries() * 2 * kv_dim_ * sizeof(double); }

std::vector<int> KVCacheBank::slots() const {
  std::vector<int> out;
  for (const auto& [key, store] : stores_) out.push_back(std::get<2>(key));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void KVCacheBank::clear() { stores_.clear(); }

void KVCacheBank::clear_slot(int slot) {
  for (auto it = stores_.begin(); it != stores_.end();) {
    if (std::get<2>(it->first) == slot)
      it = stores_.erase(it);
    else
      ++it;
  }
}

RelativeCosts relative_costs(KVMode mode, int n_recursions, double active_tokens,
                             double context_tokens) {
  if (n_recursions < 1) throw ConfigError("relative_costs: n_recursions must be >= 1");
  if (!(active_tokens >= 1.0 && active_tokens <= context_tokens))
    throw DomainError("relative_costs: need 1 <= k <= N_ctx");
  const double nr = n_recursions;
  const double frac = active_tokens / context_tokens;
  RelativeCosts c;
  switch (mode) {
    case KVMode::PerDepth:
      break;
    case KVMode::RecursionWise:
      c.kv_memory = (nr + 1.0) / (2.0 * nr);
      c.kv_io = c.kv_memory;
      c.attn_flops = frac * frac;
      break;
    case KVMode::RecursiveShare:
      c.kv_memory = 1.0 / nr;
      c.kv_io = 1.0;
      c.attn_flops = frac;
      break;
  }
  return c;
}

}  // namespace recursor
