#pragma once

#include <span>
#include <vector>

#include "crcl/numerics.hpp"

namespace crcl {

struct FusionConfig {
  double tau = 0.1;
  double lambda = 0.5;

  // Running divergence statistics for streaming (single-sample) inference;
  // batch evaluation computes its threshold from the batch itself.
  double div_mean = 0.0;
  double div_m2 = 0.0;
  long div_count = 0;

  void observe_divergence(double d_sym);
  double running_threshold() const;
};

/// theta_div = mean + lambda * population std over the batch.
double divergence_threshold(std::span<const double> d_values, double lambda);

/// Maximum class probability of a distribution.
double confidence(const Vec& pi);

struct FusedPrediction {
  Vec z_fused;
  int y_star = 0;
  bool gate = false;  // true when the learners disagree beyond the threshold
  double d_sym = 0.0;
  double alpha_conservative = 0.0;
  double alpha_radical = 0.0;
};

/// Agreement (gate off): the more confident learner's logits, bitwise
/// unmodified, with ties going to the conservative learner. Disagreement
/// (gate on): confidence-weighted convex combination of both logit vectors.
FusedPrediction fuse(const Vec& z_conservative, const Vec& z_radical,
                     const FusionConfig& cfg, double theta_div);

/// Batch path: all divergences first, one threshold, then per-sample fusion.
std::vector<FusedPrediction> fuse_batch(const Mat& z_conservative,
                                        const Mat& z_radical,
                                        const FusionConfig& cfg);

}  // namespace crcl
