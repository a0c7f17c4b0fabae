#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "recursor/corpus.hpp"
#include "recursor/model.hpp"
#include "recursor/routing.hpp"
#include "recursor/tensor.hpp"

namespace recursor {

// How per-depth cross-entropies are weighted.
enum class ExitWeighting { Single, WeightedAvg, UnweightedAvg, Aggressive };
enum class KdMode { None, ForwardKL, LayerwiseDyna };

std::string to_string(ExitWeighting w);
std::string to_string(KdMode k);
ExitWeighting exit_weighting_from_string(const std::string& s);
KdMode kd_mode_from_string(const std::string& s);

struct LossSchedule {
  ExitWeighting mode = ExitWeighting::Single;
  // Intermediate coefficient for Aggressive; the final depth keeps 1.
  double aggressive = 0.1;
  KdMode kd = KdMode::None;
  double kd_coeff = 1.0;

  void validate() const;
};

// Single -> final only; WeightedAvg -> i / sum(i); UnweightedAvg -> 1/n;
// Aggressive(c) -> c for intermediates and 1 for the final depth.
std::vector<double> exit_coefficients(const LossSchedule& schedule, int depths);

// Weighted cross-entropy over depths (last entry is the final depth). With
// ForwardKL the mean KL from the detached final distribution to each
// intermediate is added, scaled by kd_coeff. Targets equal to `ignore` are skipped.
Tensor exit_loss(std::span<const Tensor> depth_logits, std::span<const int> targets,
                 const LossSchedule& schedule, int ignore = -1);

// Monotone m(1) <= ... <= m(L_S) minimizing the summed MSE between shallow
// layer i and deep layer m(i); ties resolve to the lexicographically smallest
// mapping. MappingError when the shallow stack is deeper than the deep one.
std::vector<int> kd_dyna_map(std::span<const Tensor> shallow, std::span<const Tensor> deep);
// Mean MSE over mapped pairs; the deep side is detached.
Tensor kd_dyna_loss(std::span<const Tensor> shallow, std::span<const Tensor> deep);
// Hidden state after every unrolled layer, gradient-free.
std::vector<Tensor> layer_hiddens(const Model& model, std::span<const int> ids);

enum class LrShape { Constant, Cosine, Trapezoid };
std::string to_string(LrShape s);
LrShape lr_shape_from_string(const std::string& s);

struct OptimConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip = 1.0;  // global gradient norm; 0 disables
  LrShape shape = LrShape::Cosine;
  std::size_t warmup = 0;
  // Trapezoid: fraction of the run spent cooling down linearly to zero.
  double cooldown_fraction = 0.2;
  double min_lr_ratio = 0.1;  // cosine floor

  void validate() const;
};

double learning_rate(const OptimConfig& config, std::size_t step, std::size_t total_steps);

// Decoupled weight decay on matrices only (norm vectors are not decayed).
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, OptimConfig config);

  // Applies the current gradients at learning rate `lr`; returns the
  // pre-clip gradient norm.
  double step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor> params_;
  OptimConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  std::size_t steps = 200;
  LossSchedule loss;
  OptimConfig optim;
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 0;  // 0: only at the end

  void validate() const;
};

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;    // total optimized loss
  double lm = 0.0;      // final-depth cross-entropy
  std::vector<double> depth_ce;
  double kd = 0.0;
  double aux = 0.0;
  double balance = 0.0;
  double z = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  RouterMetrics router;

  void write_jsonl(std::ostream& out) const;
};

// Everything a step needs besides the batch.
struct TrainState {
  Model* model = nullptr;
  Router* router = nullptr;          // optional
  const Model* teacher = nullptr;    // LayerwiseDyna only
  KVMode kv_mode = KVMode::PerDepth;
};

// Loss and its components for one batch, with the graph still attached.
struct BatchLoss {
  Tensor total;
  StepMetrics metrics;
  std::vector<RoutingTrace> traces;
};

BatchLoss batch_loss(const TrainState& state, const Batch& batch, const LossSchedule& schedule);

// All trainable tensors: model weights then router networks.
std::vector<Tensor> trainable_parameters(const TrainState& state);

// One optimizer update. NumericError when the loss is not finite.
StepMetrics train_step(const TrainState& state, const Batch& batch, const LossSchedule& schedule,
                       AdamW& optim, double lr);

// Runs `config.steps` updates on batches from `corpus`. `on_step` sees every
// step's metrics; `on_checkpoint` is called at checkpoint steps and at the end.
void train(const TrainState& state, Corpus& corpus, const TrainConfig& config,
           const std::function<void(const StepMetrics&)>& on_step,
           const std::function<void(std::size_t)>& on_checkpoint = {});

// Overlap of the selected and unselected activated-score histograms at
// recursion steps >= 2 (bins over [0, 1]); 0 means perfectly separated.
double score_overlap(std::span<const RoutingTrace> traces, std::size_t bins = 20);

}  // namespace recursor
