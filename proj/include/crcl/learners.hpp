#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include "crcl/backbone.hpp"
#include "crcl/data.hpp"
#include "crcl/numerics.hpp"

namespace crcl {

enum class Role { conservative, radical };

struct LearnerState {
  AdapterSet adapters;
  Mat classifier;  // d x classes seen; column j is the head for class j
  Role role = Role::conservative;
};

struct TrainConfig {
  int batch_size = 48;
  int epochs_first = 20;
  int epochs_later = 15;
  double lr_init = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct ConsolidationConfig {
  double alpha = 0.99;
};

/// Prototype columns: L2-normalize each embedding, average per class,
/// re-normalize the mean. Input is indexed by class (all must be non-empty).
Mat imprint_classifier(const std::vector<std::vector<Vec>>& per_class_embeddings);

/// Imprints only the listed classes into an existing classifier, leaving
/// other columns untouched. The classifier is grown if a class id is beyond
/// its current column count.
void imprint_columns(Mat& classifier,
                     const std::map<int, std::vector<Vec>>& per_class_embeddings);

struct CeResult {
  double loss = 0.0;
  Mat d_embeddings;  // n x d
  Mat d_classifier;  // d x C
};

/// Mean cross-entropy of softmax(W^T phi) over the batch.
CeResult loss_ce(const Mat& classifier, const Mat& embeddings,
                 const std::vector<int>& labels);

struct RadicalLossResult {
  double loss = 0.0;
  Mat d_embeddings_radical;  // gradient flows to A_R through this
  Mat d_classifier;          // accumulates both CE terms
};

/// L_R = CE(W_R^T phi_R, y) + CE(W_R^T phi_C, y). The conservative embeddings
/// are constants: no gradient is produced for them.
RadicalLossResult loss_radical(const Mat& classifier_radical,
                               const Mat& embeddings_radical,
                               const Mat& embeddings_conservative,
                               const std::vector<int>& labels);

/// Session-1 domain alignment: SGD+momentum with a cosine schedule on the
/// adapters, classifier re-imprinted from clean embeddings at every epoch end.
LearnerState train_session_one(const FrozenBackbone& backbone,
                               const TaskData& task, const TrainConfig& config,
                               int bottleneck_dim);

/// Deep copy of the conservative adapters for the radical learner's warm start.
AdapterSet forward_transfer(const LearnerState& conservative);

/// Trains the radical adapters and classifier on the combined loss for
/// epochs_later epochs. The radical classifier must already be expanded and
/// imprinted to total_classes columns; the conservative learner is read-only.
void train_radical(LearnerState& radical, const LearnerState& conservative,
                   const FrozenBackbone& backbone, const TaskData& task,
                   const TrainConfig& config, int total_classes);

/// Elementwise theta_C <- alpha*theta_C + (1-alpha)*theta_R, clamped to the
/// closed interval of its two sources.
AdapterSet consolidate_ema(const AdapterSet& conservative,
                           const AdapterSet& radical,
                           const ConsolidationConfig& cfg);

/// Random horizontal flip plus rotation in {-10deg, 0, +10deg} per sample.
/// Only meaningful for image-shaped rows.
Mat augment_batch(const Mat& batch, const ImageShape& shape,
                  std::mt19937_64& rng);

}  // namespace crcl
