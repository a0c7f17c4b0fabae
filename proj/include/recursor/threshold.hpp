#pragma once

#include <optional>
#include <span>
#include <vector>

namespace recursor {

struct BetaParams {
  double alpha = 1.0;
  double beta = 1.0;
};

// Two-component mixture over exit confidences. Component 1 holds samples whose
// shallow prediction agreed with the full-depth one. Priors are fixed at 0.5.
struct BetaMixture {
  BetaParams disagree;
  BetaParams agree;
};

struct CalibrationSample {
  double confidence = 0.0;
  bool agree = false;
};

// Throws DomainError for x outside [0, 1].
double beta_pdf(double x, double alpha, double beta);

// Method-of-moments inversion with population variance. Empty when the
// variance is zero or not below mean (1 - mean).
std::optional<BetaParams> beta_from_moments(double mean, double variance);
std::optional<BetaParams> fit_beta(std::span<const double> samples);

// Empty when either class has fewer than two samples or an infeasible spread.
std::optional<BetaMixture> fit_moments(std::span<const CalibrationSample> samples);

// Posterior probability of the agree class. NumericError when both densities vanish.
double posterior_agree(double x, const BetaMixture& mixture);

struct ThresholdEstimate {
  double lambda = 1.0;
  bool reached = false;  // false: posterior never reached zeta, lambda forced to 1
};

inline constexpr double kThresholdGrid = 1e-4;

// Smallest lambda on the grid with posterior >= zeta.
ThresholdEstimate estimate_threshold(const BetaMixture& mixture, double zeta,
                                     double grid = kThresholdGrid);

struct AdaptiveThresholdConfig {
  double zeta = 0.4;
  double initial = 0.9;
  double calibration_fraction = 0.03;
};

// Calibration store plus the current threshold. A fit that cannot be made
// keeps the previous threshold.
class AdaptiveThreshold {
 public:
  explicit AdaptiveThreshold(AdaptiveThresholdConfig config = {});

  const AdaptiveThresholdConfig& config() const { return config_; }
  double lambda() const { return lambda_; }
  const std::vector<double>& history() const { return history_; }
  const std::vector<CalibrationSample>& samples() const { return samples_; }
  const std::optional<BetaMixture>& mixture() const { return mixture_; }
  bool warned() const { return warned_; }

  void add(double confidence, bool agree);
  // Returns true when the threshold was updated.
  bool refit();
  // Number of sequences out of `total` used for calibration (at least one).
  std::size_t calibration_sequences(std::size_t total) const;

 private:
  AdaptiveThresholdConfig config_;
  double lambda_;
  bool warned_ = false;
  std::vector<CalibrationSample> samples_;
  std::optional<BetaMixture> mixture_;
  std::vector<double> history_;
};

}  // namespace recursor
