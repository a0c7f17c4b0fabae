#include "recursor/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "recursor/errors.hpp"
#include "recursor/ops.hpp"

namespace recursor {

namespace {

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<RouterKind> kKinds[] = {{RouterKind::ExpertChoice, "expert_choice"},
                                           {RouterKind::TokenChoice, "token_choice"}};
constexpr EnumName<RouterActivation> kActs[] = {{RouterActivation::Sigmoid, "sigmoid"},
                                                {RouterActivation::Tanh, "tanh"},
                                                {RouterActivation::Softmax, "softmax"}};
constexpr EnumName<RouterArch> kArchs[] = {
    {RouterArch::Linear, "linear"}, {RouterArch::MLP, "mlp"}, {RouterArch::WideMLP, "wide_mlp"}};
constexpr EnumName<AuxMode> kAux[] = {
    {AuxMode::AuxLoss, "aux_loss"}, {AuxMode::AuxRouter, "aux_router"}, {AuxMode::None, "none"}};
constexpr EnumName<BalanceMode> kBal[] = {{BalanceMode::BalanceLoss, "balance_loss"},
                                          {BalanceMode::LossFree, "loss_free"},
                                          {BalanceMode::None, "none"}};

template <typename E, std::size_t N>
std::string name_of(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

template <typename E, std::size_t N>
E parse(const EnumName<E> (&table)[N], const std::string& s, const char* what) {
  for (const auto& e : table)
    if (s == e.name) return e.value;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

Tensor init_matrix(Rng& rng, std::size_t rows, std::size_t cols, double std) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal(0.0, std);
  return Tensor::from({rows, cols}, std::move(v)).set_requires_grad();
}

RouterNet make_net(RouterArch arch, std::size_t d, std::size_t out, Rng& rng, double std) {
  RouterNet net;
  if (arch == RouterArch::Linear) {
    net.w1 = init_matrix(rng, d, out, std);
  } else {
    const std::size_t hidden = arch == RouterArch::WideMLP ? 4 * d : d;
    net.w1 = init_matrix(rng, d, hidden, std);
    net.w2 = init_matrix(rng, hidden, out, std);
  }
  return net;
}

}  // namespace

std::string to_string(RouterKind v) { return name_of(kKinds, v); }
std::string to_string(RouterActivation v) { return name_of(kActs, v); }
std::string to_string(RouterArch v) { return name_of(kArchs, v); }
std::string to_string(AuxMode v) { return name_of(kAux, v); }
std::string to_string(BalanceMode v) { return name_of(kBal, v); }
RouterKind router_kind_from_string(const std::string& s) { return parse(kKinds, s, "router kind"); }
RouterActivation router_activation_from_string(const std::string& s) {
  return parse(kActs, s, "router activation");
}
RouterArch router_arch_from_string(const std::string& s) { return parse(kArchs, s, "router arch"); }
AuxMode aux_mode_from_string(const std::string& s) { return parse(kAux, s, "aux mode"); }
BalanceMode balance_mode_from_string(const std::string& s) {
  return parse(kBal, s, "balance mode");
}

RouterConfig RouterConfig::expert_choice() { return RouterConfig{}; }

RouterConfig RouterConfig::token_choice() {
  RouterConfig c;
  c.kind = RouterKind::TokenChoice;
  c.activation = RouterActivation::Softmax;
  c.alpha = 1.0;
  c.aux_mode = AuxMode::None;
  c.balance_mode = BalanceMode::BalanceLoss;
  c.balance_coeff = 0.1;
  c.z_coeff = 1e-3;
  return c;
}

void RouterConfig::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("router.alpha must be positive");
  if (aux_coeff < 0 || balance_coeff < 0 || z_coeff < 0)
    throw ConfigError("router loss coefficients must be non-negative");
  if (!(bias_update_rate > 0.0)) throw ConfigError("router.bias_update_rate must be positive");
  if (kind == RouterKind::ExpertChoice) {
    if (balance_mode != BalanceMode::None)
      throw ConfigError("router.balance_mode applies to token-choice routing only");
    if (activation == RouterActivation::Softmax)
      throw ConfigError("router.activation softmax is degenerate for scalar expert-choice scores");
  } else {
    if (aux_mode != AuxMode::None)
      throw ConfigError("router.aux_mode applies to expert-choice routing only");
  }
}

Tensor RouterNet::logits(const Tensor& hidden) const {
  if (!w2.defined()) return matmul(hidden, w1);
  return matmul(gelu(matmul(hidden, w1)), w2);
}

std::vector<Tensor> RouterNet::parameters() const {
  std::vector<Tensor> out{w1};
  if (w2.defined()) out.push_back(w2);
  return out;
}

Router Router::create(const RouterConfig& config, int n_recursions, std::size_t d_model, Rng& rng,
                      double init_std) {
  config.validate();
  if (n_recursions < 1) throw ConfigError("router: n_recursions must be >= 1");
  Router r;
  r.config_ = config;
  r.n_recursions_ = n_recursions;
  r.d_model_ = d_model;
  if (config.kind == RouterKind::ExpertChoice) {
    for (int s = 0; s < n_recursions; ++s) r.nets_.push_back(make_net(config.arch, d_model, 1, rng, init_std));
    if (config.aux_mode == AuxMode::AuxRouter)
      for (int s = 0; s < n_recursions; ++s)
        r.aux_nets_.push_back(make_net(config.arch, d_model, 1, rng, init_std));
  } else {
    r.nets_.push_back(make_net(config.arch, d_model, static_cast<std::size_t>(n_recursions), rng, init_std));
  }
  r.biases_.assign(n_recursions, 0.0);
  r.load_counts_.assign(n_recursions, 0);
  return r;
}

Tensor Router::logits(int step, const Tensor& hidden) const {
  if (nets_.empty()) throw ContractError("router has no parameters");
  if (config_.kind == RouterKind::TokenChoice) return nets_[0].logits(hidden);
  if (step < 1 || step > n_recursions_) throw IndexError("router step out of range");
  return nets_[step - 1].logits(hidden);
}

Tensor Router::aux_logits(int step, const Tensor& hidden) const {
  if (aux_nets_.empty()) throw ContractError("router has no auxiliary network");
  if (step < 1 || step > n_recursions_) throw IndexError("router step out of range");
  return aux_nets_[step - 1].logits(hidden);
}

Tensor Router::activate(const Tensor& logits) const {
  switch (config_.activation) {
    case RouterActivation::Sigmoid:
      return sigmoid(logits);
    case RouterActivation::Tanh:
      return tanh(logits);
    case RouterActivation::Softmax:
      return softmax(logits, -1);
  }
  return logits;
}

std::vector<std::pair<std::string, Tensor>> Router::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto add = [&](const std::string& prefix, const RouterNet& net) {
    out.emplace_back(prefix + ".w1", net.w1);
    if (net.w2.defined()) out.emplace_back(prefix + ".w2", net.w2);
  };
  for (std::size_t i = 0; i < nets_.size(); ++i) add("router." + std::to_string(i + 1), nets_[i]);
  for (std::size_t i = 0; i < aux_nets_.size(); ++i)
    add("router_aux." + std::to_string(i + 1), aux_nets_[i]);
  return out;
}

std::vector<int> capacity_schedule(int n_recursions, int tokens) {
  if (n_recursions < 1) throw ConfigError("capacity_schedule: n_recursions must be >= 1");
  if (tokens < 0) throw DomainError("capacity_schedule: negative token count");
  std::vector<int> k(n_recursions);
  for (int r = 1; r <= n_recursions; ++r)
    k[r - 1] = static_cast<int>((static_cast<long long>(tokens) * (n_recursions - r + 1)) / n_recursions);
  return k;
}

std::vector<bool> expert_choice_select(std::span<const double> scores, int k) {
  return expert_choice_select(scores, std::vector<bool>(scores.size(), true), k);
}

std::vector<bool> expert_choice_select(std::span<const double> scores,
                                       const std::vector<bool>& active, int k) {
  if (active.size() != scores.size()) throw DimensionError("expert_choice_select: mask length");
  std::vector<int> idx;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (active[i]) idx.push_back(static_cast<int>(i));
  if (k < 0 || static_cast<std::size_t>(k) > idx.size())
    throw CapacityError("expert_choice_select: capacity " + std::to_string(k) + " exceeds " +
                        std::to_string(idx.size()) + " active tokens");
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<bool> mask(scores.size(), false);
  for (int i = 0; i < k; ++i) mask[idx[i]] = true;
  return mask;
}

std::vector<int> token_choice_assign(std::span<const double> g, int n_recursions,
                                     std::span<const double> biases) {
  if (n_recursions < 1 || g.size() % n_recursions != 0)
    throw DimensionError("token_choice_assign: scores are not [T x N_r]");
  if (!biases.empty() && biases.size() != static_cast<std::size_t>(n_recursions))
    throw DimensionError("token_choice_assign: one bias per recursion count");
  const std::size_t t = g.size() / n_recursions;
  std::vector<int> depth(t);
  for (std::size_t i = 0; i < t; ++i) {
    int best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n_recursions; ++j) {
      const double v = g[i * n_recursions + j] + (biases.empty() ? 0.0 : biases[j]);
      if (v > best_v) {
        best_v = v;
        best = j;
      }
    }
    depth[i] = best + 1;
  }
  return depth;
}

Tensor aux_bce_loss(const Tensor& scores, const std::vector<bool>& selected) {
  if (scores.numel() != selected.size()) throw DimensionError("aux_bce_loss: mask length");
  std::vector<double> targets(selected.size());
  for (std::size_t i = 0; i < selected.size(); ++i) targets[i] = selected[i] ? 1.0 : 0.0;
  return binary_cross_entropy(scores, targets);
}

Tensor balancing_loss(const Tensor& probs, std::span<const int> depths, double coeff) {
  if (probs.rank() != 2) throw DimensionError("balancing_loss: probs must be [T x N_r]");
  const std::size_t t = probs.dim(0), n = probs.dim(1);
  if (depths.size() != t) throw DimensionError("balancing_loss: one assignment per token");
  if (t == 0) throw DimensionError("balancing_loss: no tokens");
  std::vector<double> f(n, 0.0);
  for (int d : depths) {
    if (d < 1 || static_cast<std::size_t>(d) > n) throw IndexError("balancing_loss: bad assignment");
    f[d - 1] += 1.0;
  }
  for (auto& x : f) x *= static_cast<double>(n) / static_cast<double>(t);
  return scale(dot(mean_rows(probs), Tensor::vector(f)), coeff);
}

std::vector<double> loss_free_update(std::span<const std::int64_t> counts,
                                     std::span<const double> biases, double rate) {
  if (counts.size() != biases.size()) throw DimensionError("loss_free_update: length mismatch");
  if (!(rate > 0.0)) throw DomainError("loss_free_update: rate must be positive");
  if (counts.empty()) return {};
  double mean = 0.0;
  for (auto c : counts) mean += static_cast<double>(c);
  mean /= static_cast<double>(counts.size());
  std::vector<double> out(biases.begin(), biases.end());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double e = mean - static_cast<double>(counts[i]);
    const double sign = e > 0 ? 1.0 : (e < 0 ? -1.0 : 0.0);
    out[i] += rate * sign;
  }
  return out;
}

Tensor z_loss(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("z_loss: logits must be [B x N]");
  return mean(square(logsumexp_rows(logits)));
}

std::vector<int> RoutingTrace::token_depths() const {
  if (kind == RouterKind::TokenChoice) return depths;
  std::vector<int> out(n_tokens, 0);
  for (const auto& step : selected)
    for (int t = 0; t < n_tokens; ++t)
      if (step[t]) ++out[t];
  return out;
}

void RoutingTrace::write_jsonl(std::ostream& out) const {
  const auto depth = token_depths();
  for (std::size_t s = 0; s < scores.size(); ++s) {
    for (int t = 0; t < n_tokens; ++t) {
      const double sc = scores[s][t];
      if (std::isnan(sc)) continue;
      nlohmann::json rec;
      rec["sample_id"] = sample_id;
      rec["token_index"] = t;
      rec["step"] = static_cast<int>(s) + 1;
      rec["score"] = sc;
      rec["selected"] = static_cast<bool>(selected[s][t]);
      rec["depth"] = depth[t];
      out << rec.dump() << '\n';
    }
  }
}

double maxvio(std::span<const double> loads) {
  if (loads.empty()) throw MetricError("maxvio: no experts");
  double mean = 0.0, mx = -std::numeric_limits<double>::infinity();
  for (double l : loads) {
    mean += l;
    mx = std::max(mx, l);
  }
  mean /= static_cast<double>(loads.size());
  if (mean <= 0.0) throw MetricError("maxvio: zero mean load");
  return (mx - mean) / mean;
}

double routing_entropy(std::span<const double> mean_probs) {
  double h = 0.0;
  for (double p : mean_probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

RouterMetrics router_metrics(std::span<const RoutingTrace> traces) {
  if (traces.empty()) throw MetricError("router_metrics: empty trace set");
  RouterMetrics m;
  const RouterKind kind = traces[0].kind;
  const int nr = traces[0].n_recursions;
  if (kind == RouterKind::ExpertChoice) {
    int positions = 0;
    for (const auto& tr : traces) positions = std::max(positions, tr.n_tokens);
    if (positions == 0) throw MetricError("router_metrics: traces hold no tokens");
    std::vector<bool> alive(positions, false);
    std::size_t agree = 0, compared = 0;
    for (const auto& tr : traces) {
      if (tr.selected.empty()) throw MetricError("router_metrics: trace without selections");
      const auto& last = tr.selected.back();
      for (int t = 0; t < tr.n_tokens; ++t)
        if (last[t]) alive[t] = true;
      for (std::size_t s = 0; s < tr.inference_selected.size(); ++s)
        for (int t = 0; t < tr.n_tokens; ++t) {
          if (std::isnan(tr.scores[s][t])) continue;
          ++compared;
          if (tr.inference_selected[s][t] == tr.selected[s][t]) ++agree;
        }
    }
    const auto dead = std::count(alive.begin(), alive.end(), false);
    m.dead_token_ratio = static_cast<double>(dead) / positions;
    if (compared) m.sampling_accuracy = static_cast<double>(agree) / static_cast<double>(compared);
  } else {
    std::vector<double> loads(nr, 0.0), mean_p(nr, 0.0);
    std::size_t tokens = 0;
    for (const auto& tr : traces) {
      for (int d : tr.depths) loads[d - 1] += 1.0;
      for (const auto& row : tr.probs) {
        for (int j = 0; j < nr; ++j) mean_p[j] += row[j];
        ++tokens;
      }
    }
    if (tokens == 0) throw MetricError("router_metrics: traces hold no tokens");
    for (auto& p : mean_p) p /= static_cast<double>(tokens);
    m.maxvio = maxvio(loads);
    m.entropy = routing_entropy(mean_p);
  }
  return m;
}

}  // namespace recursor
