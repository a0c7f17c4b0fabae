#pragma once

#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "recursor/kv_cache.hpp"
#include "recursor/model.hpp"
#include "recursor/rng.hpp"
#include "recursor/routing.hpp"
#include "recursor/threshold.hpp"

namespace recursor {

enum class ExitPolicy { None, Confidence, Oracle, Static, Router };
// How deep-layer keys of an exited token are produced.
enum class FillMode { Parallel, StateCopy, Skip };
enum class SamplerKind { Greedy, TopK, Nucleus };

std::string to_string(ExitPolicy p);
std::string to_string(FillMode f);
std::string to_string(SamplerKind s);
ExitPolicy exit_policy_from_string(const std::string& s);
FillMode fill_mode_from_string(const std::string& s);
SamplerKind sampler_kind_from_string(const std::string& s);

inline constexpr int kExitRunCap = 32;

struct DecodeOptions {
  ExitPolicy policy = ExitPolicy::None;
  // Confidence exit fires when top-1 probability is strictly above this.
  double threshold = 0.9;
  int static_depth = 1;
  FillMode fill = FillMode::Parallel;
  int run_cap = kExitRunCap;
  KVMode kv_mode = KVMode::PerDepth;
  const Router* router = nullptr;
  // Run every token at full depth and collect (depth-1 confidence, agreement) samples.
  bool calibrate = false;
};

struct SamplerConfig {
  SamplerKind kind = SamplerKind::Greedy;
  int top_k = 1;
  double top_p = 1.0;
  double temperature = 1.0;
};

struct ExitRecord {
  int sample_id = 0;
  int position = 0;
  int exit_depth = 0;
  double confidence = 0.0;
};

void write_exit_trace(std::ostream& out, std::span<const ExitRecord> records);
// Throws ReplayError on malformed lines.
std::vector<ExitRecord> read_exit_trace(std::istream& in);

// An exited token whose deeper keys are not yet materialized.
struct PendingToken {
  int position = 0;
  int depth = 0;   // last stage computed
  Tensor hidden;   // [1 x d_model] at that stage boundary
};

struct DecodeStats {
  std::size_t deep_forwards = 0;   // stage forwards that carried pending rows
  std::size_t max_width = 1;       // widest stage forward
  std::size_t last_width = 1;
  std::size_t max_pending = 0;
  std::size_t forced_flushes = 0;  // flushes triggered by the run cap
};

// Top-1 softmax probability.
double confidence(std::span<const double> logits);
// Smallest depth whose argmax equals the last row's argmax.
int oracle_exit_depth(const std::vector<std::vector<double>>& per_depth_logits);
int argmax(std::span<const double> logits);
int sample_token(std::span<const double> logits, const SamplerConfig& config, Rng& rng);

class DecodeSession {
 public:
  DecodeSession(const Model& model, DecodeOptions options, int sample_id = 0);
  ~DecodeSession();
  DecodeSession(DecodeSession&&) noexcept;
  DecodeSession& operator=(DecodeSession&&) = delete;

  // Full-depth pass over consecutive tokens; returns the last row's logits [1 x V].
  Tensor prefill(std::span<const int> tokens);
  // Feeds one token; returns next-token logits from its exit depth [1 x V].
  Tensor step(int token);
  // Computes deep keys for every pending token.
  void flush();

  void set_threshold(double lambda) { options_.threshold = lambda; }
  const DecodeOptions& options() const { return options_; }
  int position() const { return next_position_; }
  const KVCacheBank& cache() const { return bank_; }
  std::vector<PendingToken>& pending_stack() { return pending_; }
  const std::vector<ExitRecord>& trace() const { return trace_; }
  const std::vector<CalibrationSample>& calibration() const { return calibration_; }
  const DecodeStats& stats() const { return stats_; }
  // Logits of every stage for the last stepped token (full-depth policies only).
  const std::vector<std::vector<double>>& last_depth_logits() const { return depth_logits_; }

 private:
  Tensor step_routed(int token);
  Tensor run_stage_with_pending(int depth, const Tensor& current, int position);
  void check_pending(int position) const;
  void copy_state(const Tensor& hidden, int position, int exit_depth);

  const Model* model_;
  DecodeOptions options_;
  int sample_id_;
  KVCacheBank bank_;
  int next_position_ = 0;
  std::vector<PendingToken> pending_;
  std::vector<ExitRecord> trace_;
  std::vector<CalibrationSample> calibration_;
  std::vector<std::vector<double>> depth_logits_;
  DecodeStats stats_;
  std::unique_ptr<DecodeSession> shadow_;  // full-depth reference for oracle exits
};

struct DecodeOutput {
  std::vector<int> tokens;
  std::vector<ExitRecord> trace;
  DecodeStats stats;
};

// Prefills the prompt at full depth then generates `max_tokens` tokens.
// LengthError when prompt + generated positions exceed the context.
DecodeOutput decode(const Model& model, const DecodeOptions& options, std::span<const int> prompt,
                    int max_tokens, const SamplerConfig& sampler, Rng& rng, int sample_id = 0);

struct ScoreOutput {
  double nll = 0.0;  // mean over predicted tokens
  std::vector<ExitRecord> trace;
};

// Teacher-forced next-token loss with the session's exit policy applied.
ScoreOutput score_sequence(const Model& model, const DecodeOptions& options,
                           std::span<const int> ids, int sample_id = 0);

// Confidence decoding whose threshold is calibrated on the first sequences
// (full depth) and refit after each calibration sequence.
struct AdaptiveDecodeOutput {
  std::vector<DecodeOutput> outputs;
  std::vector<double> threshold_history;
  bool warned = false;
};
AdaptiveDecodeOutput decode_adaptive(const Model& model, DecodeOptions options,
                                     const std::vector<std::vector<int>>& prompts, int max_tokens,
                                     const SamplerConfig& sampler, Rng& rng,
                                     AdaptiveThreshold& threshold);

}  // namespace recursor
