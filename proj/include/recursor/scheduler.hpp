#pragma once

#include <cstddef>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "recursor/decode.hpp"
#include "recursor/rng.hpp"

namespace recursor {

enum class BatchMode { Vanilla, Sequence, Depth };

std::string to_string(BatchMode m);
// "vanilla", "csb", "cdb"
BatchMode batch_mode_from_string(const std::string& s);

struct Request {
  int id = 0;
  double arrival = 0.0;
  int tokens = 1;
  // One entry per token; empty means every token runs all stages.
  std::vector<int> exit_depths;
};

// Tick duration as a function of how many tokens a tick carries.
struct CostTable {
  double fixed = 1.0;
  double per_token = 0.0;
  // Explicit duration for width 1, 2, ...; overrides fixed/per_token when set.
  std::vector<double> by_width;
  // Batched final norm/head work for tokens that left before the last stage.
  // Zero disables the extra ticks.
  double residual = 0.0;
  // Charged per skipped stage of an exited token, in the tick it exits.
  double kv_update = 0.0;

  // ConfigError on negative or decreasing entries.
  void validate() const;
  double tick(std::size_t width) const;
};

struct SchedulerConfig {
  std::size_t max_batch = 32;
  int n_stages = 3;
  CostTable cost;
  // Keep per-token stage steps in the timeline (for property checks).
  bool record_steps = false;

  void validate() const;
};

struct TokenStep {
  int request = 0;
  int token = 0;
  int depth = 0;  // stage applied in this tick
};

struct Tick {
  double start = 0.0;
  double end = 0.0;
  std::size_t width = 0;
  bool residual = false;
  std::vector<std::size_t> per_depth;  // tokens at each stage, n_stages entries
  std::vector<TokenStep> steps;        // filled when record_steps is set
};

struct RequestOutcome {
  int id = 0;
  double arrival = 0.0;
  double admitted = 0.0;
  double finish = 0.0;
  int tokens = 0;
};

struct Timeline {
  BatchMode mode = BatchMode::Vanilla;
  std::size_t max_batch = 0;
  std::vector<Tick> ticks;
  std::vector<RequestOutcome> requests;  // in admission order
  std::size_t completed_tokens = 0;

  double finish() const { return ticks.empty() ? 0.0 : ticks.back().end; }
};

// Whole batches: the next batch is admitted only once every member finishes.
Timeline schedule_vanilla(std::span<const Request> requests, const SchedulerConfig& config);
// Finished sequences are replaced between decode steps; stages run in lockstep.
Timeline schedule_csb(std::span<const Request> requests, const SchedulerConfig& config);
// Every slot advances one stage per tick independent of the others; tokens
// leave at their exit depth and free slots refill FIFO.
Timeline schedule_cdb(std::span<const Request> requests, const SchedulerConfig& config);
Timeline schedule(BatchMode mode, std::span<const Request> requests, const SchedulerConfig& config);

struct ThroughputReport {
  std::size_t requests = 0;
  std::size_t tokens = 0;
  std::size_t ticks = 0;
  double makespan = 0.0;
  double tokens_per_tick = 0.0;  // tokens per unit of simulated time
  double mean_latency = 0.0;
  double p95_latency = 0.0;      // nearest rank
  double utilization = 0.0;      // busy slot time / (max_batch * busy time)
};

ThroughputReport throughput_report(const Timeline& timeline);

// Fills each request's exit depths from a decode trace keyed by sample id.
// ReplayError on missing samples, length mismatch, gaps, or depths outside [1, n_stages].
void attach_traces(std::vector<Request>& requests, std::span<const ExitRecord> trace, int n_stages);
// One request per sample id, arriving at 0, in ascending id order.
std::vector<Request> requests_from_trace(std::span<const ExitRecord> trace, int n_stages);

struct RandomScenarioOptions {
  std::size_t n_requests = 64;
  double mean_tokens = 16.0;
  double sd_tokens = 4.0;
  // Poisson arrival rate per tick; zero queues everything at tick 0.
  double arrival_rate = 0.0;
  // Probability of exiting at each stage; empty draws uniformly.
  std::vector<double> exit_probs;
};

std::vector<Request> random_scenario(const RandomScenarioOptions& options, int n_stages, Rng& rng);

struct Scenario {
  SchedulerConfig config;
  std::optional<BatchMode> mode;
  std::vector<Request> requests;
};

// Line-delimited records: {"kind":"config", ...} and {"kind":"request", ...};
// "header" records are skipped.
// A request record may carry "count" to expand into consecutive ids.
// ConfigError on malformed input.
Scenario read_scenario(std::istream& in);
void write_scenario(std::ostream& out, const Scenario& scenario);

void write_timeline(std::ostream& out, const Timeline& timeline);
void write_report(std::ostream& out, const ThroughputReport& report, BatchMode mode);

}  // namespace recursor
