// recursor: train | decode | simulate | flops
//
// Exit codes: 0 success, 2 configuration or user error, 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "recursor/checkpoint.hpp"
#include "recursor/config.hpp"
#include "recursor/cost_model.hpp"
#include "recursor/decode.hpp"
#include "recursor/errors.hpp"
#include "recursor/scheduler.hpp"
#include "recursor/threshold.hpp"
#include "recursor/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace recursor;

namespace {

constexpr int kOk = 0;
constexpr int kUserError = 2;
constexpr int kNumericError = 3;

json header(const std::string& command, const std::string& hash, std::uint64_t seed) {
  return json{{"kind", "header"}, {"command", command}, {"config_hash", hash}, {"seed", seed}};
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// "name" or "name:value"
std::pair<std::string, std::string> split_flag(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) return {s, ""};
  return {s.substr(0, colon), s.substr(colon + 1)};
}

double parse_number(const std::string& flag, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(flag + ": expected a number, got '" + text + "'");
  }
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::size_t> steps;
};

int cmd_train(const TrainArgs& args) {
  RunConfig cfg = load_run_config(args.config);
  apply_seed_override(cfg);
  if (args.steps) {
    cfg.train.steps = *args.steps;
    cfg.validate();
  }
  const fs::path out = args.out.empty() ? fs::path(cfg.output_dir) : fs::path(args.out);
  const std::string hash = config_hash(cfg);

  std::optional<Model> teacher;
  if (cfg.train.loss.kd == KdMode::LayerwiseDyna) {
    teacher = load_checkpoint(cfg.resolve(cfg.teacher)).model;
    if (teacher->spec().d_model != cfg.model.d_model)
      throw ConfigError("train.loss.teacher: teacher width differs from model.d_model");
    if (teacher->spec().n_layers < cfg.model.n_recursions)
      throw ConfigError("train.loss.teacher: teacher has fewer layers than the student has exit stages");
  }

  Rng rng(cfg.seed);
  Model model = Model::random(cfg.model, rng, cfg.init_std);
  std::optional<Router> router;
  if (cfg.router) router = Router::create(*cfg.router, cfg.model.n_recursions, cfg.model.d_model, rng, cfg.init_std);
  DataConfig data = cfg.data;
  data.base_dir = cfg.base_dir;
  Corpus corpus(data, cfg.seed + 1);

  fs::create_directories(out);
  {
    auto run = open_out(out / "run.json");
    json j{{"config", to_json(cfg)}, {"config_hash", hash}, {"seed", cfg.seed}};
    run << j.dump(2) << '\n';
  }
  auto metrics = open_out(out / "metrics.jsonl");
  metrics << header("train", hash, cfg.seed).dump() << '\n';

  TrainState state{&model, router ? &*router : nullptr, teacher ? &*teacher : nullptr, cfg.kv_mode};
  double last_loss = 0.0;
  const fs::path ckpt = out / "checkpoint";
  train(
      state, corpus, cfg.train,
      [&](const StepMetrics& m) {
        last_loss = m.loss;
        if (m.step == 1 || m.step % cfg.train.log_every == 0 || m.step == cfg.train.steps) m.write_jsonl(metrics);
      },
      [&](std::size_t step) { save_checkpoint(ckpt.string(), cfg, model, router ? &*router : nullptr, step); });
  metrics.flush();
  std::cout << "trained " << cfg.name << " steps=" << cfg.train.steps << " loss=" << last_loss
            << " config_hash=" << hash << " seed=" << cfg.seed << " checkpoint=" << ckpt.string() << '\n';
  return kOk;
}

// ---- decode ----------------------------------------------------------------

struct DecodeArgs {
  std::string checkpoint;
  std::string prompts;
  std::string out = "decode_out";
  std::string exit = "none";
  std::string sampler = "greedy";
  std::string fill = "parallel";
  std::string kv_mode = "per_depth";
  double temperature = 1.0;
  int max_tokens = 16;
  bool adaptive = false;
  double zeta = 0.4;
  double calibration = 0.03;
  std::optional<std::uint64_t> seed;
};

void parse_exit(const std::string& text, DecodeOptions& opts, const Router* router) {
  const auto [name, value] = split_flag(text);
  if (name == "none") {
    opts.policy = ExitPolicy::None;
  } else if (name == "oracle") {
    opts.policy = ExitPolicy::Oracle;
  } else if (name == "confidence") {
    opts.policy = ExitPolicy::Confidence;
    if (!value.empty()) opts.threshold = parse_number("--exit", value);
  } else if (name == "static") {
    opts.policy = ExitPolicy::Static;
    opts.static_depth = static_cast<int>(parse_number("--exit", value));
  } else if (name == "router") {
    if (!router) throw ConfigError("--exit=router: the checkpoint has no router");
    opts.policy = ExitPolicy::Router;
    opts.router = router;
  } else {
    throw ConfigError("--exit: unknown policy '" + text + "' (none, oracle, confidence:<l>, static:<d>, router)");
  }
  if (!value.empty() && name != "confidence" && name != "static")
    throw ConfigError("--exit=" + name + " takes no value");
}

SamplerConfig parse_sampler(const std::string& text, double temperature) {
  SamplerConfig s;
  s.temperature = temperature;
  const auto [name, value] = split_flag(text);
  if (name == "greedy") {
    s.kind = SamplerKind::Greedy;
  } else if (name == "topk") {
    s.kind = SamplerKind::TopK;
    s.top_k = static_cast<int>(parse_number("--sampler", value));
  } else if (name == "nucleus") {
    s.kind = SamplerKind::Nucleus;
    s.top_p = parse_number("--sampler", value);
  } else {
    throw ConfigError("--sampler: unknown sampler '" + text + "' (greedy, topk:<k>, nucleus:<p>)");
  }
  return s;
}

std::vector<std::vector<int>> read_prompts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompt file '" + path + "'");
  std::vector<std::vector<int>> prompts;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    prompts.push_back(encode_bytes(line, true, false));
  }
  return prompts;
}

int cmd_decode(const DecodeArgs& args) {
  if (!fs::exists(fs::path(args.checkpoint) / "manifest"))
    throw IoError("no checkpoint at '" + args.checkpoint + "'");
  const Checkpoint ck = load_checkpoint(args.checkpoint);
  std::uint64_t seed = ck.config.seed;
  if (auto env = seed_from_env()) seed = *env;
  if (args.seed) seed = *args.seed;

  DecodeOptions opts;
  opts.fill = fill_mode_from_string(args.fill);
  opts.kv_mode = kv_mode_from_string(args.kv_mode);
  parse_exit(args.exit, opts, ck.router ? &*ck.router : nullptr);
  const SamplerConfig sampler = parse_sampler(args.sampler, args.temperature);
  if (args.max_tokens < 0) throw ConfigError("--max-tokens: must be non-negative");
  if (args.adaptive && opts.policy != ExitPolicy::Confidence)
    throw ConfigError("--adaptive-threshold needs --exit=confidence");
  const auto prompts = read_prompts(args.prompts);

  const fs::path out(args.out);
  fs::create_directories(out);
  auto tokens_out = open_out(out / "tokens.jsonl");
  auto trace_out = open_out(out / "exit_trace.jsonl");
  const json head = header("decode", ck.config_hash, seed);
  tokens_out << head.dump() << '\n';
  trace_out << head.dump() << '\n';

  Rng rng(seed);
  std::vector<DecodeOutput> outputs;
  if (args.adaptive) {
    AdaptiveThresholdConfig tc;
    tc.zeta = args.zeta;
    tc.initial = opts.threshold;
    tc.calibration_fraction = args.calibration;
    AdaptiveThreshold threshold(tc);
    auto res = decode_adaptive(ck.model, opts, prompts, args.max_tokens, sampler, rng, threshold);
    outputs = std::move(res.outputs);
    auto hist = open_out(out / "thresholds.jsonl");
    hist << head.dump() << '\n';
    for (std::size_t i = 0; i < res.threshold_history.size(); ++i)
      hist << json{{"kind", "threshold"}, {"sequence", i}, {"lambda", res.threshold_history[i]}}.dump() << '\n';
    if (res.warned) std::cerr << "warning: posterior never reached zeta; threshold forced to 1\n";
  } else {
    for (std::size_t i = 0; i < prompts.size(); ++i)
      outputs.push_back(decode(ck.model, opts, prompts[i], args.max_tokens, sampler, rng, static_cast<int>(i)));
  }
  std::size_t exits = 0, total = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto& o = outputs[i];
    tokens_out << json{{"kind", "sequence"}, {"sample_id", i}, {"tokens", o.tokens}, {"text", decode_bytes(o.tokens)}}
                      .dump()
               << '\n';
    write_exit_trace(trace_out, o.trace);
    for (const auto& r : o.trace) {
      ++total;
      exits += r.exit_depth < ck.model.spec().n_recursions;
    }
  }
  std::cout << "decoded " << outputs.size() << " sequences, " << total << " tokens, " << exits
            << " early exits; config_hash=" << ck.config_hash << " seed=" << seed << '\n';
  return kOk;
}

// ---- simulate --------------------------------------------------------------

struct SimulateArgs {
  std::string scenario;
  std::string trace;
  std::string mode;
  std::optional<std::size_t> max_batch;
  std::optional<int> stages;
  std::string out;
  std::string timeline;
};

int cmd_simulate(const SimulateArgs& args) {
  if (args.scenario.empty() == args.trace.empty())
    throw ConfigError("simulate: give exactly one of --scenario or --trace");
  Scenario sc;
  std::string bytes;
  if (!args.scenario.empty()) {
    bytes = read_file(args.scenario);
    std::istringstream in(bytes);
    sc = read_scenario(in);
  } else {
    bytes = read_file(args.trace);
    std::istringstream in(bytes);
    const auto trace = read_exit_trace(in);
    if (args.stages) sc.config.n_stages = *args.stages;
    sc.requests = requests_from_trace(trace, sc.config.n_stages);
  }
  if (args.stages) sc.config.n_stages = *args.stages;
  if (args.max_batch) sc.config.max_batch = *args.max_batch;
  sc.config.validate();

  std::vector<BatchMode> modes;
  if (!args.mode.empty() && args.mode != "all") modes.push_back(batch_mode_from_string(args.mode));
  else if (args.mode.empty() && sc.mode) modes.push_back(*sc.mode);
  else modes = {BatchMode::Vanilla, BatchMode::Sequence, BatchMode::Depth};

  std::ostringstream flags;
  flags << bytes << "|max_batch=" << sc.config.max_batch << "|stages=" << sc.config.n_stages;
  const std::string hash = hex64(fnv1a64(flags.str()));
  const std::uint64_t seed = seed_from_env().value_or(0);

  std::ofstream file;
  if (!args.out.empty()) file = open_out(args.out);
  std::ostream& out = args.out.empty() ? std::cout : file;
  out << header("simulate", hash, seed).dump() << '\n';
  std::ofstream tl;
  if (!args.timeline.empty()) {
    tl = open_out(args.timeline);
    tl << header("simulate", hash, seed).dump() << '\n';
  }
  for (auto mode : modes) {
    const Timeline t = schedule(mode, sc.requests, sc.config);
    write_report(out, throughput_report(t), mode);
    if (tl.is_open()) write_timeline(tl, t);
  }
  return kOk;
}

// ---- flops -----------------------------------------------------------------

struct FlopsArgs {
  std::string config;
  std::optional<std::size_t> seq_len;
  double tokens = 20e9;
  std::size_t bytes = 2;
  std::optional<double> budget;
  bool count_head = false;
};

int cmd_flops(const FlopsArgs& args) {
  RunConfig cfg = load_run_config(args.config);
  apply_seed_override(cfg);
  const std::size_t T = args.seq_len.value_or(cfg.model.context_len);
  if (T == 0) throw ConfigError("--seq-len: must be positive");
  CostOptions co;
  co.kv_mode = cfg.kv_mode;
  co.router = cfg.router;
  if (cfg.router) co.capacity = linear_capacity(cfg.model.n_recursions);
  co.count_head = args.count_head;

  std::cout << header("flops", config_hash(cfg), cfg.seed).dump() << '\n';
  const auto p = count_params(cfg.model, co);
  std::cout << json{{"kind", "params"},       {"embedding", p.embedding}, {"head", p.head},
                    {"attention", p.attention}, {"mlp", p.mlp},           {"norm", p.norm},
                    {"router", p.router},       {"lora", p.lora},         {"unique_blocks", p.blocks},
                    {"non_embedding", p.non_embedding()}, {"total", p.total()}}
                   .dump()
            << '\n';
  const auto f = forward_flops(cfg.model, T, co);
  std::cout << json{{"kind", "forward_flops"}, {"seq_len", T},        {"linear", f.linear},
                    {"attention", f.attention}, {"router", f.router},   {"lora", f.lora},
                    {"head", f.head},           {"total", f.total()},   {"per_token", f.per_token()},
                    {"depth_tokens", f.depth_tokens}}
                   .dump()
            << '\n';
  std::cout << json{{"kind", "training_flops"}, {"tokens", args.tokens},
                    {"total", training_flops(cfg.model, T, args.tokens, co)}}
                   .dump()
            << '\n';
  std::cout << json{{"kind", "kv_cache"},
                    {"seq_len", T},
                    {"bytes_per_element", args.bytes},
                    {"cached_lengths", cached_lengths(cfg.model, T, co)},
                    {"bytes", kv_bytes(cfg.model, T, args.bytes, co)}}
                   .dump()
            << '\n';
  if (args.budget)
    std::cout << json{{"kind", "max_batch"}, {"budget_bytes", *args.budget},
                      {"max_batch", max_batch(cfg.model, T, args.bytes, *args.budget, co)}}
                     .dump()
              << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"recursor: recursive transformers with per-token recursion depth"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a model from a run config");
  train_cmd->add_option("config", ta.config, "run config (JSON)")->required();
  train_cmd->add_option("--out", ta.out, "output directory (default: config output_dir)");
  train_cmd->add_option("--steps", ta.steps, "override train.steps");

  DecodeArgs da;
  auto* decode_cmd = app.add_subcommand("decode", "generate from a checkpoint with early exits");
  decode_cmd->add_option("--checkpoint", da.checkpoint, "checkpoint directory")->required();
  decode_cmd->add_option("--prompts", da.prompts, "prompt file, one prompt per line")->required();
  decode_cmd->add_option("--out", da.out, "output directory");
  decode_cmd->add_option("--exit", da.exit, "none | oracle | confidence:<l> | static:<d> | router");
  decode_cmd->add_option("--sampler", da.sampler, "greedy | topk:<k> | nucleus:<p>");
  decode_cmd->add_option("--temperature", da.temperature);
  decode_cmd->add_option("--fill", da.fill, "parallel | state_copy | skip");
  decode_cmd->add_option("--kv-mode", da.kv_mode, "per_depth | recursion_wise | recursive_share");
  decode_cmd->add_option("--max-tokens", da.max_tokens, "tokens generated per prompt");
  decode_cmd->add_flag("--adaptive-threshold", da.adaptive, "calibrate the confidence threshold online");
  decode_cmd->add_option("--zeta", da.zeta, "posterior level for the adaptive threshold");
  decode_cmd->add_option("--calibration", da.calibration, "fraction of prompts decoded at full depth");
  decode_cmd->add_option("--seed", da.seed, "sampling seed (default: checkpoint seed)");

  SimulateArgs sa;
  auto* sim_cmd = app.add_subcommand("simulate", "replay a scenario or exit trace through the batch scheduler");
  sim_cmd->add_option("--scenario", sa.scenario, "scenario JSONL");
  sim_cmd->add_option("--trace", sa.trace, "exit trace JSONL from decode");
  sim_cmd->add_option("--mode", sa.mode, "vanilla | csb | cdb | all");
  sim_cmd->add_option("--max-batch", sa.max_batch);
  sim_cmd->add_option("--stages", sa.stages, "number of depth stages");
  sim_cmd->add_option("--out", sa.out, "report file (default: stdout)");
  sim_cmd->add_option("--timeline", sa.timeline, "per-tick timeline file");

  FlopsArgs fa;
  auto* flops_cmd = app.add_subcommand("flops", "parameter, FLOPs and KV-cache accounting for a config");
  flops_cmd->add_option("config", fa.config, "run config (JSON)")->required();
  flops_cmd->add_option("--seq-len", fa.seq_len, "sequence length (default: context_len)");
  flops_cmd->add_option("--tokens", fa.tokens, "training tokens");
  flops_cmd->add_option("--bytes", fa.bytes, "bytes per cached element");
  flops_cmd->add_option("--budget", fa.budget, "memory budget in bytes for the max-batch estimate");
  flops_cmd->add_flag("--count-head", fa.count_head, "include classifier FLOPs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUserError;
  }

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*decode_cmd) return cmd_decode(da);
    if (*sim_cmd) return cmd_simulate(sa);
    if (*flops_cmd) return cmd_flops(fa);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumericError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return kUserError;
}
