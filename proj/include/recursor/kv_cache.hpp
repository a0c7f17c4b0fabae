#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "recursor/tensor.hpp"

namespace recursor {

enum class KVMode { PerDepth, RecursionWise, RecursiveShare };

std::string to_string(KVMode mode);
KVMode kv_mode_from_string(const std::string& name);

struct KVGathered {
  Tensor keys;    // [n x kv_dim]
  Tensor values;  // [n x kv_dim]
  std::vector<int> positions;
};

// Key/value storage indexed by (depth, sublayer, slot).
//
// Depths 1..N_r are recursion steps; depth 0 and depth N_r+1 hold the unrouted
// first/last layers of the Middle sharing variants and always cache their own
// entries. `sublayer` distinguishes layers inside one recursion block.
// Entries are kept as row chunks so gradients flow through cached keys during
// training forwards.
class KVCacheBank {
 public:
  KVCacheBank(KVMode mode, int n_recursions, std::size_t kv_dim, int sublayers = 1);

  KVMode mode() const { return mode_; }
  int n_recursions() const { return n_recursions_; }
  std::size_t kv_dim() const { return kv_dim_; }
  int sublayers() const { return sublayers_; }

  // Appends rows with strictly increasing positions, all beyond the last
  // stored position for (depth, sublayer, slot).
  void append_rows(int depth, int sublayer, int slot, std::span<const int> positions,
                   const Tensor& keys, const Tensor& values);
  void append(int depth, int slot, int position, std::span<const double> key,
              std::span<const double> value, int sublayer = 0);

  // Entries visible to a query at `query_position`. RecursiveShare reads
  // depth 1 for every recursion depth.
  KVGathered gather(int depth, int slot, int query_position, int sublayer = 0) const;

  // RecursionWise only: reads at depth >= 2 also see recursion-1 entries for
  // positions not cached at that depth.
  void set_share_inactive(bool on) { share_inactive_ = on; }
  bool share_inactive() const { return share_inactive_; }

  // Depth whose storage a read at `depth` resolves to.
  int storage_depth(int depth) const;

  int last_position(int depth, int slot, int sublayer = 0) const;
  std::size_t entries(int depth) const;
  std::size_t entries(int depth, int sublayer, int slot) const;
  std::size_t total_entries() const;
  std::size_t bytes() const;
  std::vector<int> slots() const;

  void clear();
  void clear_slot(int slot);

 private:
  struct Chunk {
    Tensor keys;
    Tensor values;
    std::vector<int> positions;
  };
  struct Store {
    std::vector<Chunk> chunks;
    int last_position = -1;
    std::size_t entries = 0;
  };
  using Key = std::tuple<int, int, int>;

  void check_depth(int depth, const char* op) const;
  void check_write(int depth) const;
  const Store* find(int depth, int sublayer, int slot) const;
  KVGathered gather_store(int depth, int sublayer, int slot, int query_position) const;

  KVMode mode_;
  int n_recursions_;
  std::size_t kv_dim_;
  int sublayers_;
  bool share_inactive_ = false;
  mutable std::map<Key, Store> stores_;
};

struct RelativeCosts {
  double kv_memory = 1.0;
  double kv_io = 1.0;
  double attn_flops = 1.0;
};

// Cost of a recursion block relative to vanilla caching under the linear
// capacity schedule; `active_tokens` is the per-step selected count k.
RelativeCosts relative_costs(KVMode mode, int n_recursions, double active_tokens,
                             double context_tokens);

}  // namespace recursor
