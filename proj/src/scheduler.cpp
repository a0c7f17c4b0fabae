#include "recursor/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "json.hpp"
#include "recursor/errors.hpp"

namespace recursor {

std::string to_string(BatchMode m) {
  switch (m) {
    case BatchMode::Vanilla:
      return "vanilla";
    case BatchMode::Sequence:
      return "csb";
    case BatchMode::Depth:
      return "cdb";
  }
  return "?";
}

BatchMode batch_mode_from_string(const std::string& s) {
  if (s == "vanilla") return BatchMode::Vanilla;
  if (s == "csb") return BatchMode::Sequence;
  if (s == "cdb") return BatchMode::Depth;
  throw ConfigError("unknown batching mode '" + s + "' (expected vanilla, csb or cdb)");
}

void CostTable::validate() const {
  if (!(fixed >= 0.0) || !(per_token >= 0.0)) throw ConfigError("cost.fixed and cost.per_token must be non-negative");
  if (!(residual >= 0.0) || !(kv_update >= 0.0))
    throw ConfigError("cost.residual and cost.kv_update must be non-negative");
  for (std::size_t i = 0; i < by_width.size(); ++i) {
    if (!(by_width[i] >= 0.0)) throw ConfigError("cost.by_width entries must be non-negative");
    if (i > 0 && by_width[i] < by_width[i - 1])
      throw ConfigError("cost.by_width must be non-decreasing in width");
  }
}

double CostTable::tick(std::size_t width) const {
  if (!by_width.empty()) {
    if (width == 0 || width > by_width.size())
      throw ConfigError("cost.by_width has no entry for width " + std::to_string(width));
    return by_width[width - 1];
  }
  return fixed + per_token * static_cast<double>(width);
}

void SchedulerConfig::validate() const {
  if (max_batch < 1) throw ConfigError("max_batch must be >= 1");
  if (n_stages < 1) throw ConfigError("n_stages must be >= 1");
  cost.validate();
  if (!cost.by_width.empty() && cost.by_width.size() < max_batch)
    throw ConfigError("cost.by_width must cover widths up to max_batch");
}

namespace {

void check_requests(std::span<const Request> requests, int n_stages) {
  for (const auto& r : requests) {
    if (r.tokens < 1) throw ConfigError("request " + std::to_string(r.id) + ": tokens must be >= 1");
    if (!(r.arrival >= 0.0)) throw ConfigError("request " + std::to_string(r.id) + ": arrival must be >= 0");
    if (!r.exit_depths.empty()) {
      if (r.exit_depths.size() != static_cast<std::size_t>(r.tokens))
        throw ConfigError("request " + std::to_string(r.id) + ": exit_depths must have one entry per token");
      for (int d : r.exit_depths)
        if (d < 1 || d > n_stages)
          throw ConfigError("request " + std::to_string(r.id) + ": exit depth " + std::to_string(d) +
                            " outside [1, " + std::to_string(n_stages) + "]");
    }
  }
}

// FIFO by arrival, ties by id.
std::vector<std::size_t> arrival_order(std::span<const Request> requests) {
  std::vector<std::size_t> order(requests.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (requests[a].arrival != requests[b].arrival) return requests[a].arrival < requests[b].arrival;
    return requests[a].id < requests[b].id;
  });
  return order;
}

int exit_of(const Request& r, int token, int n_stages) {
  return r.exit_depths.empty() ? n_stages : r.exit_depths[token];
}

struct Slot {
  std::size_t request = 0;
  std::size_t outcome = 0;  // index into Timeline::requests
  int token = 0;
  int depth = 0;  // stages finished for the current token
};

class Clock {
 public:
  Clock(Timeline& tl, const SchedulerConfig& config) : tl_(tl), config_(config) {}

  double now() const { return now_; }
  void idle_until(double t) { now_ = std::max(now_, t); }

  Tick& open(std::size_t width) {
    Tick tick;
    tick.start = now_;
    tick.width = width;
    tick.per_depth.assign(config_.n_stages, 0);
    tl_.ticks.push_back(std::move(tick));
    return tl_.ticks.back();
  }
  void close(double extra = 0.0) {
    Tick& t = tl_.ticks.back();
    t.end = t.start + config_.cost.tick(t.width) + extra;
    now_ = t.end;
  }

 private:
  Timeline& tl_;
  const SchedulerConfig& config_;
  double now_ = 0.0;
};

Timeline start(BatchMode mode, std::span<const Request> requests, const SchedulerConfig& config) {
  config.validate();
  check_requests(requests, config.n_stages);
  Timeline tl;
  tl.mode = mode;
  tl.max_batch = config.max_batch;
  return tl;
}

std::size_t admit(Timeline& tl, const Request& r, double now) {
  tl.requests.push_back({r.id, r.arrival, now, 0.0, r.tokens});
  return tl.requests.size() - 1;
}

// One decode step for every slot in lockstep, all stages; exits are ignored.
void lockstep_step(Timeline& tl, Clock& clock, std::vector<Slot>& slots, const SchedulerConfig& config) {
  for (int stage = 1; stage <= config.n_stages; ++stage) {
    Tick& tick = clock.open(slots.size());
    tick.per_depth[stage - 1] = slots.size();
    if (config.record_steps)
      for (const auto& s : slots) tick.steps.push_back({tl.requests[s.outcome].id, s.token, stage});
    clock.close();
  }
  for (auto& s : slots) ++s.token;
  tl.completed_tokens += slots.size();
}

}  // namespace

Timeline schedule_vanilla(std::span<const Request> requests, const SchedulerConfig& config) {
  Timeline tl = start(BatchMode::Vanilla, requests, config);
  Clock clock(tl, config);
  const auto order = arrival_order(requests);
  std::size_t next = 0;
  while (next < order.size()) {
    clock.idle_until(requests[order[next]].arrival);
    std::vector<Slot> batch;
    while (next < order.size() && batch.size() < config.max_batch &&
           requests[order[next]].arrival <= clock.now()) {
      batch.push_back({order[next], admit(tl, requests[order[next]], clock.now()), 0, 0});
      ++next;
    }
    while (!batch.empty()) {
      lockstep_step(tl, clock, batch, config);
      for (const auto& s : batch)
        if (s.token == requests[s.request].tokens) tl.requests[s.outcome].finish = clock.now();
      std::erase_if(batch, [&](const Slot& s) { return s.token == requests[s.request].tokens; });
    }
  }
  return tl;
}

Timeline schedule_csb(std::span<const Request> requests, const SchedulerConfig& config) {
  Timeline tl = start(BatchMode::Sequence, requests, config);
  Clock clock(tl, config);
  const auto order = arrival_order(requests);
  std::size_t next = 0;
  std::vector<Slot> slots;
  while (next < order.size() || !slots.empty()) {
    if (slots.empty()) clock.idle_until(requests[order[next]].arrival);
    while (next < order.size() && slots.size() < config.max_batch &&
           requests[order[next]].arrival <= clock.now()) {
      slots.push_back({order[next], admit(tl, requests[order[next]], clock.now()), 0, 0});
      ++next;
    }
    lockstep_step(tl, clock, slots, config);
    for (const auto& s : slots)
      if (s.token == requests[s.request].tokens) tl.requests[s.outcome].finish = clock.now();
    std::erase_if(slots, [&](const Slot& s) { return s.token == requests[s.request].tokens; });
  }
  return tl;
}

Timeline schedule_cdb(std::span<const Request> requests, const SchedulerConfig& config) {
  Timeline tl = start(BatchMode::Depth, requests, config);
  Clock clock(tl, config);
  const auto order = arrival_order(requests);
  const int n = config.n_stages;
  std::size_t next = 0;
  std::vector<Slot> slots;
  std::size_t exited = 0;  // tokens awaiting batched residual work

  auto residual_tick = [&](std::size_t width) {
    Tick& tick = clock.open(width);
    tick.residual = true;
    tick.end = tick.start + config.cost.residual;
    clock.idle_until(tick.end);
  };

  while (next < order.size() || !slots.empty()) {
    if (slots.empty()) clock.idle_until(requests[order[next]].arrival);
    while (next < order.size() && slots.size() < config.max_batch &&
           requests[order[next]].arrival <= clock.now()) {
      slots.push_back({order[next], admit(tl, requests[order[next]], clock.now()), 0, 0});
      ++next;
    }
    Tick& tick = clock.open(slots.size());
    double kv_extra = 0.0;
    for (auto& s : slots) {
      ++s.depth;
      ++tick.per_depth[s.depth - 1];
      if (config.record_steps) tick.steps.push_back({tl.requests[s.outcome].id, s.token, s.depth});
      const int exit = exit_of(requests[s.request], s.token, n);
      if (s.depth == exit) {
        kv_extra += config.cost.kv_update * static_cast<double>(n - exit);
        if (exit < n) ++exited;
        ++s.token;
        s.depth = 0;
        ++tl.completed_tokens;
      }
    }
    clock.close(kv_extra);
    for (const auto& s : slots)
      if (s.token == requests[s.request].tokens) tl.requests[s.outcome].finish = clock.now();
    std::erase_if(slots, [&](const Slot& s) { return s.token == requests[s.request].tokens; });
    if (config.cost.residual > 0.0 && exited >= config.max_batch) {
      residual_tick(config.max_batch);
      exited -= config.max_batch;
    }
  }
  if (config.cost.residual > 0.0 && exited > 0) residual_tick(exited);
  return tl;
}

Timeline schedule(BatchMode mode, std::span<const Request> requests, const SchedulerConfig& config) {
  switch (mode) {
    case BatchMode::Vanilla:
      return schedule_vanilla(requests, config);
    case BatchMode::Sequence:
      return schedule_csb(requests, config);
    case BatchMode::Depth:
      return schedule_cdb(requests, config);
  }
  throw ConfigError("unknown batching mode");
}

ThroughputReport throughput_report(const Timeline& timeline) {
  ThroughputReport r;
  r.requests = timeline.requests.size();
  r.tokens = timeline.completed_tokens;
  r.ticks = timeline.ticks.size();
  r.makespan = timeline.finish();
  if (r.requests == 0) return r;
  if (r.makespan > 0.0) r.tokens_per_tick = static_cast<double>(r.tokens) / r.makespan;
  std::vector<double> lat;
  lat.reserve(r.requests);
  for (const auto& q : timeline.requests) lat.push_back(q.finish - q.arrival);
  r.mean_latency = std::accumulate(lat.begin(), lat.end(), 0.0) / static_cast<double>(lat.size());
  std::sort(lat.begin(), lat.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(lat.size())));
  r.p95_latency = lat[std::max<std::size_t>(rank, 1) - 1];
  double busy = 0.0, occupied = 0.0;
  for (const auto& t : timeline.ticks) {
    if (t.residual) continue;
    const double dur = t.end - t.start;
    busy += dur;
    occupied += dur * static_cast<double>(t.width);
  }
  if (busy > 0.0) r.utilization = occupied / (busy * static_cast<double>(timeline.max_batch));
  return r;
}

void attach_traces(std::vector<Request>& requests, std::span<const ExitRecord> trace, int n_stages) {
  std::map<int, std::vector<const ExitRecord*>> by_sample;
  for (const auto& rec : trace) by_sample[rec.sample_id].push_back(&rec);
  for (auto& [id, recs] : by_sample)
    std::sort(recs.begin(), recs.end(), [](auto* a, auto* b) { return a->position < b->position; });
  for (auto& r : requests) {
    auto it = by_sample.find(r.id);
    if (it == by_sample.end()) throw ReplayError("no trace records for request " + std::to_string(r.id));
    const auto& recs = it->second;
    if (recs.size() != static_cast<std::size_t>(r.tokens))
      throw ReplayError("request " + std::to_string(r.id) + " has " + std::to_string(r.tokens) +
                        " tokens but the trace has " + std::to_string(recs.size()));
    r.exit_depths.clear();
    for (std::size_t i = 0; i < recs.size(); ++i) {
      if (i > 0 && recs[i]->position != recs[i - 1]->position + 1)
        throw ReplayError("trace for request " + std::to_string(r.id) + " has non-consecutive positions");
      const int d = recs[i]->exit_depth;
      if (d < 1 || d > n_stages)
        throw ReplayError("trace exit depth " + std::to_string(d) + " outside [1, " + std::to_string(n_stages) + "]");
      r.exit_depths.push_back(d);
    }
  }
}

std::vector<Request> requests_from_trace(std::span<const ExitRecord> trace, int n_stages) {
  std::map<int, int> counts;
  for (const auto& rec : trace) ++counts[rec.sample_id];
  std::vector<Request> out;
  for (auto [id, n] : counts) out.push_back({id, 0.0, n, {}});
  attach_traces(out, trace, n_stages);
  return out;
}

std::vector<Request> random_scenario(const RandomScenarioOptions& options, int n_stages, Rng& rng) {
  if (n_stages < 1) throw ConfigError("n_stages must be >= 1");
  if (!(options.mean_tokens >= 1.0) || !(options.sd_tokens >= 0.0))
    throw ConfigError("scenario token length distribution is invalid");
  if (!(options.arrival_rate >= 0.0)) throw ConfigError("arrival_rate must be non-negative");
  std::vector<double> cdf;
  if (!options.exit_probs.empty()) {
    if (options.exit_probs.size() != static_cast<std::size_t>(n_stages))
      throw ConfigError("exit_probs must have one entry per stage");
    double acc = 0.0;
    for (double p : options.exit_probs) {
      if (!(p >= 0.0)) throw ConfigError("exit_probs must be non-negative");
      cdf.push_back(acc += p);
    }
    if (!(acc > 0.0)) throw ConfigError("exit_probs must not all be zero");
    for (double& c : cdf) c /= acc;
  }
  std::vector<Request> out;
  double t = 0.0;
  for (std::size_t i = 0; i < options.n_requests; ++i) {
    Request r;
    r.id = static_cast<int>(i);
    if (options.arrival_rate > 0.0) {
      double u = rng.uniform();
      while (u <= 0.0) u = rng.uniform();
      t += -std::log(u) / options.arrival_rate;
      r.arrival = std::floor(t);
    }
    r.tokens = std::max(1, static_cast<int>(std::lround(rng.normal(options.mean_tokens, options.sd_tokens))));
    for (int k = 0; k < r.tokens; ++k) {
      if (cdf.empty()) {
        r.exit_depths.push_back(1 + static_cast<int>(rng.below(n_stages)));
      } else {
        const double u = rng.uniform();
        const auto at = std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
        r.exit_depths.push_back(1 + static_cast<int>(std::min<std::ptrdiff_t>(at, n_stages - 1)));
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

Scenario read_scenario(std::istream& in) {
  Scenario sc;
  std::string line;
  int lineno = 0;
  int next_id = 0;
  bool saw_config = false;
  std::vector<nlohmann::json> pending;
  try {
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      auto j = nlohmann::json::parse(line);
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "header") continue;
      if (kind == "config") {
        if (saw_config) throw ConfigError("duplicate config record");
        saw_config = true;
        sc.config.max_batch = j.value("max_batch", sc.config.max_batch);
        sc.config.n_stages = j.value("n_stages", sc.config.n_stages);
        if (j.contains("mode")) sc.mode = batch_mode_from_string(j.at("mode").get<std::string>());
        if (j.contains("cost")) {
          const auto& c = j.at("cost");
          for (const auto& [key, value] : c.items())
            if (key != "fixed" && key != "per_token" && key != "by_width" && key != "residual" &&
                key != "kv_update")
              throw ConfigError("unknown cost field '" + key + "'");
          sc.config.cost.fixed = c.value("fixed", 1.0);
          sc.config.cost.per_token = c.value("per_token", 0.0);
          sc.config.cost.by_width = c.value("by_width", std::vector<double>{});
          sc.config.cost.residual = c.value("residual", 0.0);
          sc.config.cost.kv_update = c.value("kv_update", 0.0);
        }
      } else if (kind == "request") {
        const int count = j.value("count", 1);
        if (count < 1) throw ConfigError("request count must be >= 1");
        for (int k = 0; k < count; ++k) {
          Request r;
          r.id = j.contains("id") ? j.at("id").get<int>() + k : next_id;
          next_id = r.id + 1;
          r.arrival = j.value("arrival", 0.0);
          r.tokens = j.value("tokens", 1);
          r.exit_depths = j.value("exit_depths", std::vector<int>{});
          // A single depth applies to every token.
          if (r.exit_depths.size() == 1 && r.tokens > 1) r.exit_depths.assign(r.tokens, r.exit_depths[0]);
          sc.requests.push_back(std::move(r));
        }
      } else {
        throw ConfigError("unknown record kind '" + kind + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("scenario line " + std::to_string(lineno) + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError("scenario line " + std::to_string(lineno) + ": " + e.what());
  }
  sc.config.validate();
  check_requests(sc.requests, sc.config.n_stages);
  return sc;
}

void write_scenario(std::ostream& out, const Scenario& scenario) {
  const auto& c = scenario.config;
  nlohmann::json head{{"kind", "config"},
                      {"max_batch", c.max_batch},
                      {"n_stages", c.n_stages},
                      {"cost",
                       {{"fixed", c.cost.fixed},
                        {"per_token", c.cost.per_token},
                        {"by_width", c.cost.by_width},
                        {"residual", c.cost.residual},
                        {"kv_update", c.cost.kv_update}}}};
  if (scenario.mode) head["mode"] = to_string(*scenario.mode);
  out << head.dump() << '\n';
  for (const auto& r : scenario.requests) {
    nlohmann::json j{{"kind", "request"}, {"id", r.id}, {"arrival", r.arrival}, {"tokens", r.tokens}};
    if (!r.exit_depths.empty()) j["exit_depths"] = r.exit_depths;
    out << j.dump() << '\n';
  }
}

void write_timeline(std::ostream& out, const Timeline& timeline) {
  for (std::size_t i = 0; i < timeline.ticks.size(); ++i) {
    const auto& t = timeline.ticks[i];
    nlohmann::json j{{"kind", "tick"},     {"index", i},           {"start", t.start},
                     {"end", t.end},       {"width", t.width},     {"residual", t.residual},
                     {"per_depth", t.per_depth}};
    out << j.dump() << '\n';
  }
  for (const auto& r : timeline.requests) {
    nlohmann::json j{{"kind", "request"}, {"id", r.id},         {"arrival", r.arrival},
                     {"admitted", r.admitted}, {"finish", r.finish}, {"tokens", r.tokens}};
    out << j.dump() << '\n';
  }
}

void write_report(std::ostream& out, const ThroughputReport& r, BatchMode mode) {
  nlohmann::json j{{"kind", "report"},
                   {"mode", to_string(mode)},
                   {"requests", r.requests},
                   {"tokens", r.tokens},
                   {"ticks", r.ticks},
                   {"makespan", r.makespan},
                   {"tokens_per_tick", r.tokens_per_tick},
                   {"mean_latency", r.mean_latency},
                   {"p95_latency", r.p95_latency},
                   {"utilization", r.utilization}};
  out << j.dump() << '\n';
}

}  // namespace recursor
