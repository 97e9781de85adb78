#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "crcl/numerics.hpp"

namespace crcl {

// Fixed random expansion d -> M, shared by both learners so their analytic
// logits live in the same feature space.
struct ProjectionHead {
  Mat w_rand;  // d x M, standard normal entries

  Eigen::Index input_dim() const { return w_rand.rows(); }
  Eigen::Index output_dim() const { return w_rand.cols(); }
};

ProjectionHead make_projection_head(int embed_dim, int expansion_dim,
                                    std::uint64_t seed);

/// h = ReLU(phi W_rand) per row.
Mat project(const Mat& embeddings, const ProjectionHead& head);

// Accumulated Gram and cross-correlation statistics; a fresh ridge solve on
// these equals a batch fit on all data ever accumulated.
struct SuffStats {
  Mat gram;   // M x M
  Mat cross;  // M x classes seen
  long num_samples = 0;

  static SuffStats zeros(int expansion_dim, int num_classes);
};

void accumulate(SuffStats& stats, const Mat& h_batch,
                const std::vector<int>& labels);

struct AnalyticClassifier {
  Mat weights;  // M x classes seen
  double beta = 1.0;
};

/// Grows the label side with zero columns; Gram and sample count untouched.
void expand_classes(SuffStats& stats, AnalyticClassifier& classifier,
                    int new_total);

AnalyticClassifier fit(const SuffStats& stats, double beta);

struct BetaSelection {
  double beta = 1.0;
  bool used_fallback = false;
  std::vector<double> fold_accuracy;  // mean held-out accuracy per grid value
};

/// 5-fold cross-validation over a logarithmic grid on session-1 projected
/// features. Ties break toward the larger (more regularized) beta. Falls back
/// to beta = 1.0 when any class has fewer than 5 samples.
BetaSelection select_beta(const Mat& h, const std::vector<int>& labels,
                          const std::vector<double>& grid, std::uint64_t seed);

std::vector<double> default_beta_grid();

Mat logits(const Mat& h_batch, const AnalyticClassifier& classifier);

}  // namespace crcl
