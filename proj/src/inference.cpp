#include "crcl/inference.hpp"

#include <cmath>

#include "crcl/errors.hpp"

namespace crcl {

void FusionConfig::observe_divergence(double d_sym) {
  ++div_count;
  const double delta = d_sym - div_mean;
  div_mean += delta / static_cast<double>(div_count);
  div_m2 += delta * (d_sym - div_mean);
}

double FusionConfig::running_threshold() const {
  if (div_count == 0) return 0.0;
  const double variance = div_m2 / static_cast<double>(div_count);
  return div_mean + lambda * std::sqrt(std::max(variance, 0.0));
}

double divergence_threshold(std::span<const double> d_values, double lambda) {
  if (d_values.empty()) {
    throw EmptyInputError("divergence_threshold: empty batch");
  }
  double mean = 0.0;
  for (double d : d_values) mean += d;
  mean /= static_cast<double>(d_values.size());
  double variance = 0.0;
  for (double d : d_values) variance += (d - mean) * (d - mean);
  variance /= static_cast<double>(d_values.size());
  return mean + lambda * std::sqrt(variance);
}

double confidence(const Vec& pi) { return pi.maxCoeff(); }

FusedPrediction fuse(const Vec& z_conservative, const Vec& z_radical,
                     const FusionConfig& cfg, double theta_div) {
  if (z_conservative.size() != z_radical.size()) {
    throw ShapeError("fuse: logit lengths differ");
  }
  Vec pi_c = softmax_temp(z_conservative, cfg.tau);
  Vec pi_r = softmax_temp(z_radical, cfg.tau);

  FusedPrediction pred;
  pred.d_sym = sym_kl(pi_c, pi_r);
  pred.gate = pred.d_sym > theta_div;

  const double conf_c = confidence(pi_c);
  const double conf_r = confidence(pi_r);
  if (pred.gate) {
    pred.alpha_conservative = conf_c / (conf_c + conf_r);
    pred.alpha_radical = conf_r / (conf_c + conf_r);
    pred.z_fused = pred.alpha_conservative * z_conservative +
                   pred.alpha_radical * z_radical;
  } else {
    // Tie goes to the conservative learner.
    const bool pick_conservative = conf_c >= conf_r;
    pred.alpha_conservative = pick_conservative ? 1.0 : 0.0;
    pred.alpha_radical = pick_conservative ? 0.0 : 1.0;
    pred.z_fused = pick_conservative ? z_conservative : z_radical;
  }

  // Lowest index wins exact ties.
  pred.y_star = 0;
  for (Eigen::Index i = 1; i < pred.z_fused.size(); ++i) {
    if (pred.z_fused(i) > pred.z_fused(pred.y_star)) {
      pred.y_star = static_cast<int>(i);
    }
  }
  return pred;
}

std::vector<FusedPrediction> fuse_batch(const Mat& z_conservative,
                                        const Mat& z_radical,
                                        const FusionConfig& cfg) {
  if (z_conservative.rows() != z_radical.rows() ||
      z_conservative.cols() != z_radical.cols()) {
    throw ShapeError("fuse_batch: logit batches misaligned");
  }
  if (z_conservative.rows() == 0) {
    throw EmptyInputError("fuse_batch: empty batch");
  }
  std::vector<double> d_values(z_conservative.rows());
  for (Eigen::Index i = 0; i < z_conservative.rows(); ++i) {
    d_values[i] = sym_kl(softmax_temp(z_conservative.row(i).transpose(), cfg.tau),
                         softmax_temp(z_radical.row(i).transpose(), cfg.tau));
  }
  const double theta = divergence_threshold(d_values, cfg.lambda);
  std::vector<FusedPrediction> out;
  out.reserve(d_values.size());
  for (Eigen::Index i = 0; i < z_conservative.rows(); ++i) {
    out.push_back(fuse(z_conservative.row(i).transpose(),
                       z_radical.row(i).transpose(), cfg, theta));
  }
  return out;
}

}  // namespace crcl
