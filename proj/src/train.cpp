#include "recursor/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "recursor/errors.hpp"
#include "recursor/ops.hpp"

namespace recursor {

std::string to_string(ExitWeighting w) {
  switch (w) {
    case ExitWeighting::Single:
      return "single";
    case ExitWeighting::WeightedAvg:
      return "weighted_avg";
    case ExitWeighting::UnweightedAvg:
      return "unweighted_avg";
    case ExitWeighting::Aggressive:
      return "aggressive";
  }
  return "?";
}

std::string to_string(KdMode k) {
  switch (k) {
    case KdMode::None:
      return "none";
    case KdMode::ForwardKL:
      return "forward_kl";
    case KdMode::LayerwiseDyna:
      return "layerwise_dyna";
  }
  return "?";
}

ExitWeighting exit_weighting_from_string(const std::string& s) {
  if (s == "single") return ExitWeighting::Single;
  if (s == "weighted_avg") return ExitWeighting::WeightedAvg;
  if (s == "unweighted_avg") return ExitWeighting::UnweightedAvg;
  if (s == "aggressive") return ExitWeighting::Aggressive;
  throw ConfigError("unknown exit weighting '" + s + "'");
}

KdMode kd_mode_from_string(const std::string& s) {
  if (s == "none") return KdMode::None;
  if (s == "forward_kl") return KdMode::ForwardKL;
  if (s == "layerwise_dyna") return KdMode::LayerwiseDyna;
  throw ConfigError("unknown kd mode '" + s + "'");
}

void LossSchedule::validate() const {
  if (!(aggressive >= 0.0)) throw ConfigError("train.loss.aggressive: must be non-negative");
  if (!(kd_coeff >= 0.0)) throw ConfigError("train.loss.kd_coeff: must be non-negative");
}

std::vector<double> exit_coefficients(const LossSchedule& schedule, int depths) {
  if (depths < 1) throw DimensionError("exit_coefficients: need at least one depth");
  std::vector<double> c(depths, 0.0);
  switch (schedule.mode) {
    case ExitWeighting::Single:
      c.back() = 1.0;
      break;
    case ExitWeighting::WeightedAvg: {
      const double total = depths * (depths + 1) / 2.0;
      for (int i = 0; i < depths; ++i) c[i] = (i + 1) / total;
      break;
    }
    case ExitWeighting::UnweightedAvg:
      std::fill(c.begin(), c.end(), 1.0 / depths);
      break;
    case ExitWeighting::Aggressive:
      std::fill(c.begin(), c.end(), schedule.aggressive);
      c.back() = 1.0;
      break;
  }
  return c;
}

namespace {

Tensor masked_ce(const Tensor& logits, std::span<const int> targets, int ignore) {
  if (ignore < 0) return cross_entropy(logits, targets);
  std::vector<bool> mask(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) mask[i] = targets[i] != ignore;
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) return Tensor::scalar(0.0);
  return cross_entropy_masked(logits, targets, mask);
}

struct ExitParts {
  Tensor total;
  std::vector<double> ce;
  double kd = 0.0;
};

ExitParts exit_parts(std::span<const Tensor> depth_logits, std::span<const int> targets,
                     const LossSchedule& schedule, int ignore) {
  if (depth_logits.empty()) throw DimensionError("exit_loss: no depths");
  const int n = static_cast<int>(depth_logits.size());
  const auto coeff = exit_coefficients(schedule, n);
  ExitParts out;
  std::vector<Tensor> terms;
  for (int i = 0; i < n; ++i) {
    if (coeff[i] == 0.0 && i + 1 < n) {
      out.ce.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const Tensor ce = masked_ce(depth_logits[i], targets, ignore);
    out.ce.push_back(ce.item());
    if (coeff[i] != 0.0) terms.push_back(scale(ce, coeff[i]));
  }
  Tensor total = terms.empty() ? Tensor::scalar(0.0) : terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  if (schedule.kd == KdMode::ForwardKL && n > 1 && schedule.kd_coeff > 0.0) {
    const Tensor teacher = depth_logits.back().detach();
    Tensor kl = forward_kl(teacher, depth_logits[0]);
    for (int i = 1; i + 1 < n; ++i) kl = add(kl, forward_kl(teacher, depth_logits[i]));
    kl = scale(kl, schedule.kd_coeff / (n - 1));
    out.kd = kl.item();
    total = add(total, kl);
  }
  out.total = total;
  return out;
}

}  // namespace

Tensor exit_loss(std::span<const Tensor> depth_logits, std::span<const int> targets,
                 const LossSchedule& schedule, int ignore) {
  return exit_parts(depth_logits, targets, schedule, ignore).total;
}

std::vector<int> kd_dyna_map(std::span<const Tensor> shallow, std::span<const Tensor> deep) {
  const std::size_t ls = shallow.size(), ld = deep.size();
  if (ls == 0) throw MappingError("kd_dyna_map: empty shallow stack");
  if (ls > ld)
    throw MappingError("kd_dyna_map: shallow stack (" + std::to_string(ls) + ") deeper than deep stack (" +
                       std::to_string(ld) + ")");
  NoGradGuard guard;
  std::vector<std::vector<double>> cost(ls, std::vector<double>(ld));
  for (std::size_t i = 0; i < ls; ++i)
    for (std::size_t j = 0; j < ld; ++j) {
      if (shallow[i].shape() != deep[j].shape()) throw DimensionError("kd_dyna_map: hidden shapes differ");
      cost[i][j] = mse(shallow[i], deep[j]).item();
    }
  // best[i][j]: cheapest completion of layers i.. given m(i) = j.
  std::vector<std::vector<double>> best(ls, std::vector<double>(ld));
  for (std::size_t j = 0; j < ld; ++j) best[ls - 1][j] = cost[ls - 1][j];
  for (std::size_t i = ls - 1; i-- > 0;) {
    double tail = std::numeric_limits<double>::infinity();
    for (std::size_t j = ld; j-- > 0;) {
      tail = std::min(tail, best[i + 1][j]);
      best[i][j] = cost[i][j] + tail;
    }
  }
  // Forward pass picks the smallest feasible index reaching the optimum.
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12 * std::max({1.0, std::abs(a), std::abs(b)}); };
  std::vector<int> m(ls);
  std::size_t lo = 0;
  double remaining = *std::min_element(best[0].begin(), best[0].end());
  for (std::size_t i = 0; i < ls; ++i) {
    for (std::size_t j = lo; j < ld; ++j)
      if (close(best[i][j], remaining)) {
        m[i] = static_cast<int>(j);
        lo = j;
        remaining -= cost[i][j];
        break;
      }
  }
  return m;
}

Tensor kd_dyna_loss(std::span<const Tensor> shallow, std::span<const Tensor> deep) {
  const auto m = kd_dyna_map(shallow, deep);
  Tensor total = mse(shallow[0], deep[m[0]].detach());
  for (std::size_t i = 1; i < m.size(); ++i) total = add(total, mse(shallow[i], deep[m[i]].detach()));
  return scale(total, 1.0 / static_cast<double>(m.size()));
}

std::vector<Tensor> layer_hiddens(const Model& model, std::span<const int> ids) {
  NoGradGuard guard;
  KVCacheBank bank = model.make_cache(KVMode::PerDepth);
  std::vector<int> pos(ids.size());
  std::iota(pos.begin(), pos.end(), 0);
  std::vector<Tensor> out;
  Tensor h = model.embed(ids);
  for (int ell = 0; ell < model.spec().n_layers; ++ell) {
    h = model.run_layer(ell, h, pos, bank, 0);
    out.push_back(h);
  }
  return out;
}

std::string to_string(LrShape s) {
  switch (s) {
    case LrShape::Constant:
      return "constant";
    case LrShape::Cosine:
      return "cosine";
    case LrShape::Trapezoid:
      return "trapezoid";
  }
  return "?";
}

LrShape lr_shape_from_string(const std::string& s) {
  if (s == "constant") return LrShape::Constant;
  if (s == "cosine") return LrShape::Cosine;
  if (s == "trapezoid") return LrShape::Trapezoid;
  throw ConfigError("unknown learning-rate shape '" + s + "'");
}

void OptimConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train.optim.lr: must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("train.optim.beta1/beta2: must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train.optim.eps: must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.optim.weight_decay: must be non-negative");
  if (!(clip >= 0.0)) throw ConfigError("train.optim.clip: must be non-negative");
  if (!(cooldown_fraction >= 0.0 && cooldown_fraction <= 1.0))
    throw ConfigError("train.optim.cooldown_fraction: must lie in [0, 1]");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0))
    throw ConfigError("train.optim.min_lr_ratio: must lie in [0, 1]");
}

double learning_rate(const OptimConfig& c, std::size_t step, std::size_t total) {
  if (c.warmup > 0 && step < c.warmup) return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup);
  switch (c.shape) {
    case LrShape::Constant:
      return c.lr;
    case LrShape::Cosine: {
      if (total <= c.warmup + 1) return c.lr;
      const double p = static_cast<double>(step - c.warmup) / static_cast<double>(total - c.warmup - 1);
      const double floor = c.lr * c.min_lr_ratio;
      return floor + 0.5 * (c.lr - floor) * (1.0 + std::cos(M_PI * std::min(1.0, p)));
    }
    case LrShape::Trapezoid: {
      const auto cool = static_cast<std::size_t>(std::llround(c.cooldown_fraction * static_cast<double>(total)));
      const std::size_t start = total > cool ? total - cool : 0;
      if (step < start || cool == 0) return c.lr;
      return c.lr * static_cast<double>(total - step) / static_cast<double>(cool);
    }
  }
  return c.lr;
}

AdamW::AdamW(std::vector<Tensor> params, OptimConfig config) : params_(std::move(params)), config_(config) {
  config_.validate();
  for (auto& p : params_) {
    p.set_requires_grad(true);
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.clear_grad();
}

double AdamW::step(double lr) {
  double sq = 0.0;
  for (const auto& p : params_)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("optimizer: gradient norm is not finite");
  const double clip = config_.clip > 0.0 && norm > config_.clip ? config_.clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto w = p.mutable_data();
    const bool decay = config_.weight_decay > 0.0 && p.rank() >= 2;
    if (decay)
      for (double& x : w) x -= lr * config_.weight_decay * x;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
    }
  }
  return norm;
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train.steps: must be >= 1");
  if (log_every < 1) throw ConfigError("train.log_every: must be >= 1");
  loss.validate();
  optim.validate();
}

void StepMetrics::write_jsonl(std::ostream& out) const {
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  nlohmann::json ce = nlohmann::json::array();
  for (double c : depth_ce) ce.push_back(num(c));
  nlohmann::json j{{"kind", "step"}, {"step", step}, {"loss", num(loss)},   {"lm", num(lm)},   {"depth_ce", ce},
                   {"kd", num(kd)}, {"aux", num(aux)},     {"balance", num(balance)},
                   {"z", num(z)},   {"grad_norm", num(grad_norm)}, {"lr", num(lr)}};
  nlohmann::json r;
  r["dead_token_ratio"] = num(router.dead_token_ratio);
  r["maxvio"] = num(router.maxvio);
  r["entropy"] = num(router.entropy);
  r["sampling_accuracy"] = num(router.sampling_accuracy);
  j["router"] = r;
  out << j.dump() << '\n';
}

BatchLoss batch_loss(const TrainState& state, const Batch& batch, const LossSchedule& schedule) {
  if (!state.model) throw ContractError("batch_loss: no model");
  if (batch.inputs.empty()) throw DimensionError("batch_loss: empty batch");
  if (schedule.kd == KdMode::LayerwiseDyna && !state.teacher)
    throw ConfigError("train.loss.kd: layerwise_dyna needs a teacher model");
  const Model& model = *state.model;
  const int nr = model.spec().n_recursions;
  const double inv_b = 1.0 / static_cast<double>(batch.inputs.size());
  BatchLoss out;
  out.metrics.depth_ce.assign(nr, 0.0);
  std::vector<Tensor> terms;
  for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
    const auto& ids = batch.inputs[b];
    const auto& tgt = batch.targets[b];
    if (ids.size() != tgt.size()) throw DimensionError("batch_loss: inputs and targets differ in length");
    KVCacheBank bank = model.make_cache(state.kv_mode);
    ForwardOptions fo;
    fo.router = state.router;
    fo.route_mode = RouteMode::Train;
    fo.cache = &bank;
    fo.sample_id = static_cast<int>(b);
    const ForwardResult res = model.forward(ids, fo);

    const bool need_depths = schedule.mode != ExitWeighting::Single || schedule.kd == KdMode::ForwardKL;
    std::vector<Tensor> depth_logits;
    if (need_depths)
      for (int r = 1; r < nr; ++r) depth_logits.push_back(intermediate_logits(model, res.stage_hidden[r - 1]));
    depth_logits.push_back(res.logits);
    auto parts = exit_parts(depth_logits, tgt, schedule, kPad);
    Tensor loss = parts.total;
    out.metrics.lm += parts.ce.back() * inv_b;
    const std::size_t offset = nr - depth_logits.size();
    for (std::size_t i = 0; i < parts.ce.size(); ++i) out.metrics.depth_ce[offset + i] += parts.ce[i] * inv_b;
    for (std::size_t i = 0; i < offset; ++i) out.metrics.depth_ce[i] = std::numeric_limits<double>::quiet_NaN();
    out.metrics.kd += parts.kd * inv_b;

    if (schedule.kd == KdMode::LayerwiseDyna && schedule.kd_coeff > 0.0) {
      const auto deep = layer_hiddens(*state.teacher, ids);
      const Tensor kd = scale(kd_dyna_loss(res.stage_hidden, deep), schedule.kd_coeff);
      out.metrics.kd += kd.item() * inv_b;
      loss = add(loss, kd);
    }

    if (state.router) {
      const auto& rc = state.router->config();
      if (rc.kind == RouterKind::ExpertChoice) {
        for (const auto& step : res.steps) {
          if (step.active.empty()) continue;
          if (rc.aux_mode != AuxMode::None && rc.aux_coeff > 0.0) {
            const Tensor& s = rc.aux_mode == AuxMode::AuxRouter ? step.aux_scores : step.scores;
            const Tensor aux = scale(aux_bce_loss(s, step.selected), rc.aux_coeff);
            out.metrics.aux += aux.item() * inv_b;
            loss = add(loss, aux);
          }
          if (rc.z_coeff > 0.0) {
            const Tensor z = scale(z_loss(step.logits), rc.z_coeff);
            out.metrics.z += z.item() * inv_b;
            loss = add(loss, z);
          }
        }
      } else {
        if (rc.balance_mode == BalanceMode::BalanceLoss && rc.balance_coeff > 0.0) {
          const Tensor bal = balancing_loss(res.router_probs, res.trace.depths, rc.balance_coeff);
          out.metrics.balance += bal.item() * inv_b;
          loss = add(loss, bal);
        }
        if (rc.z_coeff > 0.0) {
          const Tensor z = scale(z_loss(res.router_logits), rc.z_coeff);
          out.metrics.z += z.item() * inv_b;
          loss = add(loss, z);
        }
      }
      out.traces.push_back(res.trace);
    }
    terms.push_back(loss);
  }
  Tensor total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  out.total = scale(total, inv_b);
  out.metrics.loss = out.total.item();
  if (!out.traces.empty()) out.metrics.router = router_metrics(out.traces);
  return out;
}

std::vector<Tensor> trainable_parameters(const TrainState& state) {
  std::vector<Tensor> out = state.model->weights().parameters();
  if (state.router)
    for (auto& [name, t] : state.router->named_parameters()) out.push_back(t);
  return out;
}

StepMetrics train_step(const TrainState& state, const Batch& batch, const LossSchedule& schedule,
                       AdamW& optim, double lr) {
  optim.zero_grad();
  BatchLoss bl = batch_loss(state, batch, schedule);
  if (!std::isfinite(bl.metrics.loss))
    throw NumericError("training loss is not finite (lm=" + std::to_string(bl.metrics.lm) +
                       ", aux=" + std::to_string(bl.metrics.aux) + ", z=" + std::to_string(bl.metrics.z) + ")");
  bl.total.backward();
  bl.metrics.grad_norm = optim.step(lr);
  bl.metrics.lr = lr;
  if (state.router && state.router->config().kind == RouterKind::TokenChoice &&
      state.router->config().balance_mode == BalanceMode::LossFree) {
    std::vector<std::int64_t> counts(state.router->n_recursions(), 0);
    for (const auto& tr : bl.traces)
      for (int d : tr.depths) ++counts[d - 1];
    auto& loads = state.router->load_counts();
    for (std::size_t i = 0; i < counts.size(); ++i) loads[i] += counts[i];
    state.router->biases() =
        loss_free_update(counts, state.router->biases(), state.router->config().bias_update_rate);
  }
  return bl.metrics;
}

void train(const TrainState& state, Corpus& corpus, const TrainConfig& config,
           const std::function<void(const StepMetrics&)>& on_step,
           const std::function<void(std::size_t)>& on_checkpoint) {
  config.validate();
  AdamW optim(trainable_parameters(state), config.optim);
  for (std::size_t s = 0; s < config.steps; ++s) {
    const Batch batch = corpus.next_batch();
    StepMetrics m = train_step(state, batch, config.loss, optim, learning_rate(config.optim, s, config.steps));
    m.step = s + 1;
    if (on_step) on_step(m);
    const bool last = s + 1 == config.steps;
    if (on_checkpoint && (last || (config.checkpoint_every && (s + 1) % config.checkpoint_every == 0)))
      on_checkpoint(s + 1);
  }
}

double score_overlap(std::span<const RoutingTrace> traces, std::size_t bins) {
  if (bins < 1) throw DomainError("score_overlap: need at least one bin");
  std::vector<double> sel, unsel;
  for (const auto& tr : traces)
    for (std::size_t s = 1; s < tr.scores.size(); ++s)
      for (int t = 0; t < tr.n_tokens; ++t) {
        const double x = tr.scores[s][t];
        if (std::isnan(x)) continue;
        (tr.selected[s][t] ? sel : unsel).push_back(x);
      }
  if (sel.empty() || unsel.empty()) throw MetricError("score_overlap: need both selected and unselected scores");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* v : {&sel, &unsel})
    for (double x : *v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  if (hi <= lo) return 1.0;
  auto hist = [&](const std::vector<double>& v) {
    std::vector<double> h(bins, 0.0);
    for (double x : v) {
      auto b = static_cast<std::size_t>((x - lo) / (hi - lo) * static_cast<double>(bins));
      h[std::min(b, bins - 1)] += 1.0 / static_cast<double>(v.size());
    }
    return h;
  };
  const auto hs = hist(sel), hu = hist(unsel);
  double overlap = 0.0;
  for (std::size_t b = 0; b < bins; ++b) overlap += std::min(hs[b], hu[b]);
  return overlap;
}

}  // namespace recursor
