#pragma once

#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "recursor/rng.hpp"
#include "recursor/tensor.hpp"

namespace recursor {

enum class RouterKind { ExpertChoice, TokenChoice };
enum class RouterActivation { Sigmoid, Tanh, Softmax };
enum class RouterArch { Linear, MLP, WideMLP };
enum class AuxMode { AuxLoss, AuxRouter, None };
enum class BalanceMode { BalanceLoss, LossFree, None };

std::string to_string(RouterKind v);
std::string to_string(RouterActivation v);
std::string to_string(RouterArch v);
std::string to_string(AuxMode v);
std::string to_string(BalanceMode v);
RouterKind router_kind_from_string(const std::string& s);
RouterActivation router_activation_from_string(const std::string& s);
RouterArch router_arch_from_string(const std::string& s);
AuxMode aux_mode_from_string(const std::string& s);
BalanceMode balance_mode_from_string(const std::string& s);

struct RouterConfig {
  RouterKind kind = RouterKind::ExpertChoice;
  RouterActivation activation = RouterActivation::Sigmoid;
  RouterArch arch = RouterArch::Linear;
  double alpha = 0.1;
  AuxMode aux_mode = AuxMode::AuxLoss;
  BalanceMode balance_mode = BalanceMode::None;
  double aux_coeff = 1e-3;
  double balance_coeff = 0.1;
  double z_coeff = 0.0;
  double bias_update_rate = 1e-3;
  // Inference-time expert-choice selection threshold on activated scores.
  double select_threshold = 0.5;

  static RouterConfig expert_choice();
  static RouterConfig token_choice();
  // Throws ConfigError on combinations that cannot be trained.
  void validate() const;
};

// Router network: Linear maps d -> out; MLP/WideMLP insert a GELU hidden layer
// of width d or 4d.
struct RouterNet {
  Tensor w1;
  Tensor w2;  // undefined for Linear

  Tensor logits(const Tensor& hidden) const;
  std::vector<Tensor> parameters() const;
};

class Router {
 public:
  Router() = default;
  static Router create(const RouterConfig& config, int n_recursions, std::size_t d_model, Rng& rng,
                       double init_std = 0.02);

  const RouterConfig& config() const { return config_; }
  RouterConfig& mutable_config() { return config_; }
  int n_recursions() const { return n_recursions_; }
  std::size_t d_model() const { return d_model_; }

  // Expert-choice: one scalar router per recursion step. Token-choice: a
  // single router emitting one logit per recursion count.
  Tensor logits(int step, const Tensor& hidden) const;
  Tensor aux_logits(int step, const Tensor& hidden) const;
  Tensor activate(const Tensor& logits) const;
  bool has_aux_router() const { return !aux_nets_.empty(); }

  std::vector<double>& biases() { return biases_; }
  const std::vector<double>& biases() const { return biases_; }
  std::vector<std::int64_t>& load_counts() { return load_counts_; }
  const std::vector<std::int64_t>& load_counts() const { return load_counts_; }

  // Parameter names are stable and used by checkpoints.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<RouterNet>& nets() { return nets_; }
  std::vector<RouterNet>& aux_nets() { return aux_nets_; }

 private:
  RouterConfig config_;
  int n_recursions_ = 0;
  std::size_t d_model_ = 0;
  std::vector<RouterNet> nets_;
  std::vector<RouterNet> aux_nets_;
  std::vector<double> biases_;
  std::vector<std::int64_t> load_counts_;
};

// k_r = floor(T * (N_r - r + 1) / N_r), r = 1..N_r.
std::vector<int> capacity_schedule(int n_recursions, int tokens);

// Selects exactly k of the scores, highest first, ties to the lower index.
std::vector<bool> expert_choice_select(std::span<const double> scores, int k);
// Same over the entries with active[i] set; inactive entries are never chosen.
std::vector<bool> expert_choice_select(std::span<const double> scores,
                                       const std::vector<bool>& active, int k);

// Per-token recursion count (1-based) = argmax_j (g[t][j] + bias[j]); ties to
// the lower count. `g` is [T x N_r] row-major.
std::vector<int> token_choice_assign(std::span<const double> g, int n_recursions,
                                     std::span<const double> biases = {});

// Mean BCE pushing selected scores to 1 and the rest to 0.
Tensor aux_bce_loss(const Tensor& scores, const std::vector<bool>& selected);

// coeff * sum_i f_i P_i with f_i = (N_r / T) count_i and P_i = mean_t g[t][i].
Tensor balancing_loss(const Tensor& probs, std::span<const int> depths, double coeff);

// b_i += u * sign(mean(c) - c_i).
std::vector<double> loss_free_update(std::span<const std::int64_t> counts,
                                     std::span<const double> biases, double rate);

// Mean over rows of logsumexp(row)^2.
Tensor z_loss(const Tensor& logits);

// One sample's routing decisions.
struct RoutingTrace {
  int sample_id = 0;
  int n_tokens = 0;
  int n_recursions = 0;
  RouterKind kind = RouterKind::ExpertChoice;
  // [step][token]; NaN where the token was not scored at that step.
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<bool>> selected;
  // Inference-rule selections for the same scores (sampling accuracy).
  std::vector<std::vector<bool>> inference_selected;
  // Token-choice: [token][expert] probabilities and chosen recursion counts.
  std::vector<std::vector<double>> probs;
  std::vector<int> depths;

  // Recursion count actually applied to each token.
  std::vector<int> token_depths() const;
  void write_jsonl(std::ostream& out) const;
};

struct RouterMetrics {
  double dead_token_ratio = std::numeric_limits<double>::quiet_NaN();
  double maxvio = std::numeric_limits<double>::quiet_NaN();
  double entropy = std::numeric_limits<double>::quiet_NaN();
  double sampling_accuracy = std::numeric_limits<double>::quiet_NaN();
};

double maxvio(std::span<const double> loads);
double routing_entropy(std::span<const double> mean_probs);
RouterMetrics router_metrics(std::span<const RoutingTrace> traces);

}  // namespace recursor
