#include "recursor/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "recursor/errors.hpp"

namespace recursor {

namespace {

using nlohmann::json;

// Typed access to one JSON object that remembers which keys were consumed.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError((path_.empty() ? "config" : path_) + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void skip(const std::string& key) { seen_.insert(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void number(const std::string& key, double& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
    out = v.get<double>();
  }

  template <typename Int>
  void integer(const std::string& key, Int& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
    if constexpr (std::is_unsigned_v<Int>) {
      if (v.is_number_unsigned()) {
        out = static_cast<Int>(v.get<std::uint64_t>());
        return;
      }
      if (v.get<std::int64_t>() < 0) throw ConfigError(where(key) + ": must be non-negative");
      out = static_cast<Int>(v.get<std::int64_t>());
    } else {
      out = static_cast<Int>(v.get<std::int64_t>());
    }
  }

  void boolean(const std::string& key, bool& out) {
    seen_.insert(key);
    if (!has(key)) return;
    if (!j_.at(key).is_boolean()) throw ConfigError(where(key) + ": expected true or false");
    out = j_.at(key).get<bool>();
  }

  void string(const std::string& key, std::string& out) {
    seen_.insert(key);
    if (!has(key)) return;
    if (!j_.at(key).is_string()) throw ConfigError(where(key) + ": expected a string");
    out = j_.at(key).get<std::string>();
  }

  // Parses an enum string, prefixing the parser's message with the field path.
  template <typename E, typename Parse>
  void choice(const std::string& key, E& out, Parse parse) {
    std::string s;
    if (!has(key)) {
      seen_.insert(key);
      return;
    }
    string(key, s);
    try {
      out = parse(s);
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown field");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

LossSchedule loss_from_json(const json& j, std::string& teacher) {
  LossSchedule s;
  Fields f(j, "train.loss");
  f.choice("mode", s.mode, exit_weighting_from_string);
  f.number("aggressive", s.aggressive);
  f.choice("kd", s.kd, kd_mode_from_string);
  f.number("kd_coeff", s.kd_coeff);
  f.string("teacher", teacher);
  f.finish();
  return s;
}

OptimConfig optim_from_json(const json& j) {
  OptimConfig o;
  Fields f(j, "train.optim");
  f.number("lr", o.lr);
  f.number("beta1", o.beta1);
  f.number("beta2", o.beta2);
  f.number("eps", o.eps);
  f.number("weight_decay", o.weight_decay);
  f.number("clip", o.clip);
  f.choice("shape", o.shape, lr_shape_from_string);
  f.integer("warmup", o.warmup);
  f.number("cooldown_fraction", o.cooldown_fraction);
  f.number("min_lr_ratio", o.min_lr_ratio);
  f.finish();
  return o;
}

DataConfig data_from_json(const json& j) {
  DataConfig d;
  Fields f(j, "data");
  f.choice("kind", d.kind, corpus_kind_from_string);
  f.integer("seq_len", d.seq_len);
  f.integer("batch", d.batch);
  f.integer("alphabet", d.alphabet);
  f.integer("modulus", d.modulus);
  f.string("text_path", d.text_path);
  f.finish();
  return d;
}

}  // namespace

nlohmann::json to_json(const ModelSpec& s) {
  return json{{"n_layers", s.n_layers},     {"n_recursions", s.n_recursions}, {"share", to_string(s.share)},
              {"d_model", s.d_model},       {"n_heads", s.n_heads},           {"n_kv_heads", s.n_kv_heads},
              {"d_head", s.d_head},         {"d_inter", s.d_inter},           {"vocab", s.vocab},
              {"context_len", s.context_len}, {"tie_embeddings", s.tie_embeddings}};
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.vocab = kByteVocab;
  Fields f(j, "model");
  f.integer("n_layers", s.n_layers);
  f.integer("n_recursions", s.n_recursions);
  f.choice("share", s.share, share_strategy_from_string);
  f.integer("d_model", s.d_model);
  f.integer("n_heads", s.n_heads);
  f.integer("n_kv_heads", s.n_kv_heads);
  f.integer("d_head", s.d_head);
  f.integer("d_inter", s.d_inter);
  f.integer("vocab", s.vocab);
  f.integer("context_len", s.context_len);
  f.boolean("tie_embeddings", s.tie_embeddings);
  f.finish();
  return s;
}

nlohmann::json to_json(const RouterConfig& c) {
  return json{{"kind", to_string(c.kind)},
              {"activation", to_string(c.activation)},
              {"arch", to_string(c.arch)},
              {"alpha", c.alpha},
              {"aux_mode", to_string(c.aux_mode)},
              {"balance_mode", to_string(c.balance_mode)},
              {"aux_coeff", c.aux_coeff},
              {"balance_coeff", c.balance_coeff},
              {"z_coeff", c.z_coeff},
              {"bias_update_rate", c.bias_update_rate},
              {"select_threshold", c.select_threshold}};
}

RouterConfig router_config_from_json(const nlohmann::json& j) {
  Fields f(j, "router");
  RouterKind kind = RouterKind::ExpertChoice;
  f.choice("kind", kind, router_kind_from_string);
  // The kind picks the preset; remaining fields override it.
  RouterConfig c = kind == RouterKind::ExpertChoice ? RouterConfig::expert_choice() : RouterConfig::token_choice();
  f.choice("activation", c.activation, router_activation_from_string);
  f.choice("arch", c.arch, router_arch_from_string);
  f.number("alpha", c.alpha);
  f.choice("aux_mode", c.aux_mode, aux_mode_from_string);
  f.choice("balance_mode", c.balance_mode, balance_mode_from_string);
  f.number("aux_coeff", c.aux_coeff);
  f.number("balance_coeff", c.balance_coeff);
  f.number("z_coeff", c.z_coeff);
  f.number("bias_update_rate", c.bias_update_rate);
  f.number("select_threshold", c.select_threshold);
  f.finish();
  return c;
}

RunConfig run_config_from_json(const nlohmann::json& j, const std::string& base_dir) {
  RunConfig c;
  c.base_dir = base_dir;
  Fields f(j, "");
  f.string("name", c.name);
  if (!f.has("model")) throw ConfigError("model: required");
  c.model = model_spec_from_json(f.raw("model"));
  f.number("init_std", c.init_std);
  f.skip("router");
  if (f.has("router")) c.router = router_config_from_json(f.raw("router"));
  f.choice("kv_mode", c.kv_mode, kv_mode_from_string);
  if (!j.contains("kv_mode") && c.router) c.kv_mode = KVMode::RecursionWise;
  f.skip("train");
  f.skip("data");
  if (f.has("train")) {
    Fields t(f.raw("train"), "train");
    t.integer("steps", c.train.steps);
    t.integer("log_every", c.train.log_every);
    t.integer("checkpoint_every", c.train.checkpoint_every);
    if (t.has("loss")) c.train.loss = loss_from_json(t.raw("loss"), c.teacher);
    if (t.has("optim")) c.train.optim = optim_from_json(t.raw("optim"));
    t.skip("loss");
    t.skip("optim");
    t.finish();
  }
  if (f.has("data")) c.data = data_from_json(f.raw("data"));
  f.integer("seed", c.seed);
  f.string("output_dir", c.output_dir);
  f.finish();
  c.data.base_dir = base_dir;
  c.validate();
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  json j;
  j["name"] = c.name;
  j["model"] = to_json(c.model);
  j["init_std"] = c.init_std;
  j["router"] = c.router ? to_json(*c.router) : json(nullptr);
  j["kv_mode"] = to_string(c.kv_mode);
  json loss{{"mode", to_string(c.train.loss.mode)},
            {"aggressive", c.train.loss.aggressive},
            {"kd", to_string(c.train.loss.kd)},
            {"kd_coeff", c.train.loss.kd_coeff}};
  if (!c.teacher.empty()) loss["teacher"] = c.teacher;
  const auto& o = c.train.optim;
  j["train"] = json{{"steps", c.train.steps},
                    {"log_every", c.train.log_every},
                    {"checkpoint_every", c.train.checkpoint_every},
                    {"loss", loss},
                    {"optim",
                     {{"lr", o.lr},
                      {"beta1", o.beta1},
                      {"beta2", o.beta2},
                      {"eps", o.eps},
                      {"weight_decay", o.weight_decay},
                      {"clip", o.clip},
                      {"shape", to_string(o.shape)},
                      {"warmup", o.warmup},
                      {"cooldown_fraction", o.cooldown_fraction},
                      {"min_lr_ratio", o.min_lr_ratio}}}};
  const auto& d = c.data;
  j["data"] = json{{"kind", to_string(d.kind)}, {"seq_len", d.seq_len},   {"batch", d.batch},
                   {"alphabet", d.alphabet},     {"modulus", d.modulus}, {"text_path", d.text_path}};
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  return j;
}

void RunConfig::validate() const {
  model.validate();
  if (!(init_std > 0.0)) throw ConfigError("init_std: must be positive");
  if (router) router->validate();
  train.validate();
  data.validate();
  if (model.vocab < kByteVocab)
    throw ConfigError("model.vocab: must be >= " + std::to_string(kByteVocab) + " for the byte vocabulary");
  if (data.seq_len > model.context_len)
    throw ConfigError("data.seq_len: " + std::to_string(data.seq_len) + " exceeds model.context_len " +
                      std::to_string(model.context_len));
  if (router) {
    if (model.n_recursions < 2) throw ConfigError("router: needs model.n_recursions >= 2");
    if (kv_mode == KVMode::PerDepth)
      throw ConfigError("kv_mode: routed models cache recursion-wise or recursive_share, not per_depth");
    if (static_cast<int>(data.seq_len) < model.n_recursions && router->kind == RouterKind::ExpertChoice)
      throw ConfigError("data.seq_len: expert-choice capacities need at least n_recursions tokens");
  } else if (kv_mode == KVMode::RecursionWise) {
    throw ConfigError("kv_mode: recursion_wise caching needs a router");
  }
  if (train.loss.kd == KdMode::LayerwiseDyna && teacher.empty())
    throw ConfigError("train.loss.teacher: layerwise_dyna needs a teacher checkpoint");
  if (train.loss.kd != KdMode::LayerwiseDyna && !teacher.empty())
    throw ConfigError("train.loss.teacher: only used with kd = layerwise_dyna");
  if (train.loss.kd == KdMode::ForwardKL && model.n_recursions < 2)
    throw ConfigError("train.loss.kd: forward_kl needs at least two exit depths");
  if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
}

std::string RunConfig::resolve(const std::string& path) const {
  std::filesystem::path p(path);
  if (p.is_relative() && !base_dir.empty()) p = std::filesystem::path(base_dir) / p;
  return p.string();
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON (" + e.what() + ")");
  }
  return run_config_from_json(j, std::filesystem::path(path).parent_path().string());
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const RunConfig& config) {
  json j = to_json(config);
  j.erase("seed");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

std::optional<std::uint64_t> seed_from_env() {
  const char* raw = std::getenv("RECURSOR_SEED");
  if (!raw || !*raw) return std::nullopt;
  const std::string s(raw);
  if (s.find_first_not_of("0123456789") != std::string::npos || s.size() > 20)
    throw ConfigError("RECURSOR_SEED: expected a non-negative integer, got '" + s + "'");
  try {
    return std::stoull(s);
  } catch (const std::out_of_range&) {
    throw ConfigError("RECURSOR_SEED: value out of range");
  }
}

void apply_seed_override(RunConfig& config) {
  if (auto s = seed_from_env()) config.seed = *s;
}

}  // namespace recursor
