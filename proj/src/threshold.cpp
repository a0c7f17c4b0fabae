#include "recursor/threshold.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "recursor/errors.hpp"

namespace recursor {

double beta_pdf(double x, double alpha, double beta) {
  if (!(x >= 0.0 && x <= 1.0)) throw DomainError("beta_pdf: x must lie in [0, 1]");
  if (!(alpha > 0.0) || !(beta > 0.0)) throw DomainError("beta_pdf: alpha and beta must be positive");
  const double log_norm = std::lgamma(alpha + beta) - std::lgamma(alpha) - std::lgamma(beta);
  // 0^0 = 1 on the boundary.
  auto log_pow = [](double base, double exponent) {
    if (exponent == 0.0) return 0.0;
    if (base == 0.0) return exponent > 0 ? -std::numeric_limits<double>::infinity()
                                         : std::numeric_limits<double>::infinity();
    return exponent * std::log(base);
  };
  return std::exp(log_norm + log_pow(x, alpha - 1.0) + log_pow(1.0 - x, beta - 1.0));
}

std::optional<BetaParams> beta_from_moments(double mean, double variance) {
  if (!(mean > 0.0 && mean < 1.0) || !(variance > 0.0)) return std::nullopt;
  if (!(variance < mean * (1.0 - mean))) return std::nullopt;
  BetaParams p;
  p.alpha = mean * (mean * (1.0 - mean) / variance - 1.0);
  p.beta = p.alpha * (1.0 - mean) / mean;
  if (!(p.alpha > 0.0) || !(p.beta > 0.0)) return std::nullopt;
  return p;
}

std::optional<BetaParams> fit_beta(std::span<const double> samples) {
  if (samples.size() < 2) return std::nullopt;
  double mean = 0.0;
  for (double s : samples) mean += s;
  mean /= static_cast<double>(samples.size());
  double var = 0.0;
  for (double s : samples) var += (s - mean) * (s - mean);
  var /= static_cast<double>(samples.size());
  return beta_from_moments(mean, var);
}

std::optional<BetaMixture> fit_moments(std::span<const CalibrationSample> samples) {
  std::vector<double> agree, disagree;
  for (const auto& s : samples) (s.agree ? agree : disagree).push_back(s.confidence);
  auto a = fit_beta(agree);
  auto d = fit_beta(disagree);
  if (!a || !d) return std::nullopt;
  return BetaMixture{*d, *a};
}

double posterior_agree(double x, const BetaMixture& m) {
  const double p1 = 0.5 * beta_pdf(x, m.agree.alpha, m.agree.beta);
  const double p0 = 0.5 * beta_pdf(x, m.disagree.alpha, m.disagree.beta);
  if (std::isinf(p1) && std::isinf(p0))
    throw NumericError("posterior_agree: both densities diverge at x=" + std::to_string(x));
  if (std::isinf(p1)) return 1.0;
  if (std::isinf(p0)) return 0.0;
  const double z = p1 + p0;
  if (!(z > 0.0)) throw NumericError("posterior_agree: both densities vanish at x=" + std::to_string(x));
  return p1 / z;
}

ThresholdEstimate estimate_threshold(const BetaMixture& mixture, double zeta, double grid) {
  if (!(grid > 0.0)) throw DomainError("estimate_threshold: grid must be positive");
  const auto steps = static_cast<long>(std::llround(1.0 / grid));
  for (long i = 0; i <= steps; ++i) {
    const double x = std::min(1.0, static_cast<double>(i) * grid);
    double post;
    try {
      post = posterior_agree(x, mixture);
    } catch (const NumericError&) {
      continue;
    }
    if (post >= zeta) return {x, true};
  }
  return {1.0, false};
}

AdaptiveThreshold::AdaptiveThreshold(AdaptiveThresholdConfig config)
    : config_(config), lambda_(config.initial) {
  if (!(config_.zeta > 0.0 && config_.zeta < 1.0)) throw ConfigError("threshold.zeta must be in (0, 1)");
  if (!(config_.initial >= 0.0 && config_.initial <= 1.0))
    throw ConfigError("threshold.initial must be in [0, 1]");
  if (!(config_.calibration_fraction > 0.0 && config_.calibration_fraction <= 1.0))
    throw ConfigError("threshold.calibration_fraction must be in (0, 1]");
}

void AdaptiveThreshold::add(double confidence, bool agree) {
  if (!(confidence >= 0.0 && confidence <= 1.0)) throw DomainError("calibration confidence outside [0, 1]");
  samples_.push_back({confidence, agree});
}

bool AdaptiveThreshold::refit() {
  auto fit = fit_moments(samples_);
  if (!fit) {
    history_.push_back(lambda_);
    return false;
  }
  mixture_ = fit;
  const auto est = estimate_threshold(*fit, config_.zeta);
  warned_ = warned_ || !est.reached;
  lambda_ = est.lambda;
  history_.push_back(lambda_);
  return true;
}

std::size_t AdaptiveThreshold::calibration_sequences(std::size_t total) const {
  if (total == 0) return 0;
  const auto n = static_cast<std::size_t>(std::ceil(config_.calibration_fraction * static_cast<double>(total)));
  return std::max<std::size_t>(1, std::min(n, total));
}

}  // namespace recursor
