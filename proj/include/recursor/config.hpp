#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"
#include "recursor/corpus.hpp"
#include "recursor/kv_cache.hpp"
#include "recursor/model.hpp"
#include "recursor/routing.hpp"
#include "recursor/train.hpp"

namespace recursor {

// One training run. Parsed from JSON; unknown keys and wrong types are
// ConfigErrors naming the offending field.
struct RunConfig {
  std::string name = "run";
  ModelSpec model;
  double init_std = 0.02;
  std::optional<RouterConfig> router;
  KVMode kv_mode = KVMode::PerDepth;
  TrainConfig train;
  // Checkpoint directory of the deep model for layerwise distillation.
  std::string teacher;
  DataConfig data;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  // Directory relative paths resolve against (the config file's directory).
  std::string base_dir;

  // Field-level checks of every module plus the cross-field rules:
  // byte vocabulary fits the model, sequences fit the context, a router needs
  // at least two recursions and a recursion-aware cache, recursion-wise
  // caching needs a router, layerwise distillation needs a teacher.
  void validate() const;
  std::string resolve(const std::string& path) const;
};

RunConfig run_config_from_json(const nlohmann::json& j, const std::string& base_dir = "");
nlohmann::json to_json(const RunConfig& config);
// Reads and validates; a missing or unparsable file is a ConfigError.
RunConfig load_run_config(const std::string& path);

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RouterConfig& config);
RouterConfig router_config_from_json(const nlohmann::json& j);

std::uint64_t fnv1a64(std::string_view bytes);
// Hash of the canonical JSON form, seed and base_dir excluded, as 16 hex digits.
std::string config_hash(const RunConfig& config);

// RECURSOR_SEED, when set, replaces the seed. ConfigError on a malformed value.
void apply_seed_override(RunConfig& config);
std::optional<std::uint64_t> seed_from_env();

}  // namespace recursor
