#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "recursor/config.hpp"
#include "recursor/model.hpp"
#include "recursor/routing.hpp"

namespace recursor {

// A checkpoint directory holds `manifest` (JSON: run config, hash, seed,
// step, tensor table) and `weights.bin` (little-endian float64, tensors
// concatenated in manifest order).
struct Checkpoint {
  RunConfig config;
  Model model;
  std::optional<Router> router;
  std::size_t step = 0;
  std::string config_hash;
};

void save_checkpoint(const std::string& dir, const RunConfig& config, const Model& model, const Router* router,
                     std::size_t step);
// IoError on missing or truncated files; ConsistencyError when the tensor
// table disagrees with the configured architecture.
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace recursor
