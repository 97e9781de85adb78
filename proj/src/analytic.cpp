#include "crcl/analytic.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>

#include "crcl/errors.hpp"

namespace crcl {

ProjectionHead make_projection_head(int embed_dim, int expansion_dim,
                                    std::uint64_t seed) {
  if (expansion_dim <= embed_dim) {
    throw InvalidParameterError("make_projection_head: M must exceed d");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  ProjectionHead head;
  head.w_rand = Mat(embed_dim, expansion_dim);
  for (Eigen::Index r = 0; r < head.w_rand.rows(); ++r) {
    for (Eigen::Index c = 0; c < head.w_rand.cols(); ++c) {
      head.w_rand(r, c) = dist(rng);
    }
  }
  return head;
}

Mat project(const Mat& embeddings, const ProjectionHead& head) {
  if (embeddings.cols() != head.input_dim()) {
    throw ShapeError("project: embedding width " +
                     std::to_string(embeddings.cols()) + " != head input dim " +
                     std::to_string(head.input_dim()));
  }
  return (embeddings * head.w_rand).cwiseMax(0.0);
}

SuffStats SuffStats::zeros(int expansion_dim, int num_classes) {
  SuffStats s;
  s.gram = Mat::Zero(expansion_dim, expansion_dim);
  s.cross = Mat::Zero(expansion_dim, num_classes);
  s.num_samples = 0;
  return s;
}

void accumulate(SuffStats& stats, const Mat& h_batch,
                const std::vector<int>& labels) {
  if (h_batch.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw ShapeError("accumulate: batch/label size mismatch");
  }
  if (h_batch.rows() == 0) return;
  if (h_batch.cols() != stats.gram.rows()) {
    throw ShapeError("accumulate: feature width does not match statistics");
  }
  const int num_classes = static_cast<int>(stats.cross.cols());
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw LabelError("accumulate: label " + std::to_string(y) +
                       " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  stats.gram.noalias() += h_batch.transpose() * h_batch;
  // H^T Y with one-hot Y: column y collects the features of class y.
  for (Eigen::Index i = 0; i < h_batch.rows(); ++i) {
    stats.cross.col(labels[i]) += h_batch.row(i).transpose();
  }
  stats.num_samples += static_cast<long>(h_batch.rows());
}

void expand_classes(SuffStats& stats, AnalyticClassifier& classifier,
                    int new_total) {
  const int current = static_cast<int>(stats.cross.cols());
  if (new_total <= current) {
    throw InvalidParameterError("expand_classes: new total " +
                                std::to_string(new_total) +
                                " must exceed current " +
                                std::to_string(current));
  }
  Mat cross = Mat::Zero(stats.cross.rows(), new_total);
  cross.leftCols(current) = stats.cross;
  stats.cross = std::move(cross);
  if (classifier.weights.size() > 0 || classifier.weights.cols() > 0) {
    Mat w = Mat::Zero(stats.gram.rows(), new_total);
    if (classifier.weights.cols() > 0) {
      w.leftCols(classifier.weights.cols()) = classifier.weights;
    }
    classifier.weights = std::move(w);
  } else {
    classifier.weights = Mat::Zero(stats.gram.rows(), new_total);
  }
}

AnalyticClassifier fit(const SuffStats& stats, double beta) {
  AnalyticClassifier classifier;
  classifier.beta = beta;
  classifier.weights = solve_ridge(stats.gram, stats.cross, beta);
  return classifier;
}

Mat logits(const Mat& h_batch, const AnalyticClassifier& classifier) {
  if (h_batch.cols() != classifier.weights.rows()) {
    throw ShapeError("logits: feature width does not match classifier");
  }
  return h_batch * classifier.weights;
}

std::vector<double> default_beta_grid() {
  return {1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3};
}

BetaSelection select_beta(const Mat& h, const std::vector<int>& labels,
                          const std::vector<double>& grid, std::uint64_t seed) {
  if (grid.empty()) {
    throw InvalidParameterError("select_beta: empty grid");
  }
  BetaSelection sel;
  std::map<int, int> counts;
  int num_classes = 0;
  for (int y : labels) {
    ++counts[y];
    num_classes = std::max(num_classes, y + 1);
  }
  for (int c = 0; c < num_classes; ++c) {
    if (counts[c] < 5) {
      sel.beta = 1.0;
      sel.used_fallback = true;
      return sel;
    }
  }

  constexpr int kFolds = 5;
  std::vector<int> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  sel.fold_accuracy.assign(grid.size(), 0.0);
  for (int fold = 0; fold < kFolds; ++fold) {
    std::vector<int> train_idx, test_idx;
    for (std::size_t i = 0; i < order.size(); ++i) {
      (static_cast<int>(i) % kFolds == fold ? test_idx : train_idx)
          .push_back(order[i]);
    }
    SuffStats stats = SuffStats::zeros(static_cast<int>(h.cols()), num_classes);
    Mat h_train(train_idx.size(), h.cols());
    std::vector<int> y_train(train_idx.size());
    for (std::size_t i = 0; i < train_idx.size(); ++i) {
      h_train.row(static_cast<Eigen::Index>(i)) = h.row(train_idx[i]);
      y_train[i] = labels[train_idx[i]];
    }
    accumulate(stats, h_train, y_train);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      AnalyticClassifier clf = fit(stats, grid[g]);
      int correct = 0;
      for (int idx : test_idx) {
        Eigen::Index pred = 0;
        (h.row(idx) * clf.weights).maxCoeff(&pred);
        if (static_cast<int>(pred) == labels[idx]) ++correct;
      }
      sel.fold_accuracy[g] +=
          static_cast<double>(correct) / static_cast<double>(test_idx.size());
    }
  }
  for (double& acc : sel.fold_accuracy) acc /= kFolds;

  // Ties break toward the larger beta.
  std::size_t best = 0;
  for (std::size_t g = 1; g < grid.size(); ++g) {
    const bool better = sel.fold_accuracy[g] > sel.fold_accuracy[best];
    const bool tie_larger = sel.fold_accuracy[g] == sel.fold_accuracy[best] &&
                            grid[g] > grid[best];
    if (better || tie_larger) best = g;
  }
  sel.beta = grid[best];
  return sel;
}

}  // namespace crcl
