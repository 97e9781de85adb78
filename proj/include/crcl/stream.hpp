#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "crcl/data.hpp"
#include "crcl/learners.hpp"
#include "crcl/numerics.hpp"

namespace crcl {

struct Dataset {
  Mat train_inputs;
  std::vector<int> train_labels;
  Mat test_inputs;
  std::vector<int> test_labels;
  int num_classes = 0;
  std::optional<ImageShape> image_shape;
};

/// Loads a dataset described by a line-oriented key=value manifest
/// (train_images, train_labels, test_images, test_labels, format=idx|csv|embed,
/// image_shape=HxWxC). Validates label density.
Dataset load_dataset(const std::string& manifest_path);

/// Normalizes inputs to [0,1] for byte data and standardizes with mean/std
/// computed from the train split only.
void standardize(Dataset& dataset);

enum class TaskOrder { given, reversed, shuffled };

TaskOrder parse_task_order(const std::string& name);
std::string task_order_name(TaskOrder order);

struct TaskSpec {
  int task_count = 0;
  std::vector<std::vector<int>> classes;  // disjoint class sets, in session order
};

/// Contiguous class groups with the remainder assigned to the earliest tasks;
/// reversed flips the group sequence, shuffled permutes class ids first.
TaskSpec split_tasks(int num_classes, int task_count, TaskOrder order,
                     std::uint64_t seed);

/// Train split restricted to the classes of session t (1-based).
TaskData task_train_split(const Dataset& dataset, const TaskSpec& spec, int t);

/// Cumulative test split over all classes introduced up to session t.
TaskData cumulative_test_split(const Dataset& dataset, const TaskSpec& spec,
                               int t);

using BatchPredictFn = std::function<std::vector<int>(const Mat&)>;

/// Top-1 accuracy in percent.
double evaluate(const BatchPredictFn& predict_fn, const TaskData& test);

struct SessionResult {
  std::vector<double> session_accuracy;  // Acc_t per session, percent
  double acc_avg = 0.0;
  double acc_last = 0.0;
};

/// (Acc_Avg, Acc_Last) of a per-session accuracy list.
std::pair<double, double> metrics(const std::vector<double>& acc_list);

struct BaselineConfig {
  TrainConfig train;
  int bottleneck_dim = 16;
};

/// Sequential finetune lower bound: one adapter+CE-head learner trained task
/// by task with no consolidation, analytic classifier, or fusion.
SessionResult run_baseline_finetune(const Dataset& dataset, const TaskSpec& spec,
                                    const FrozenBackbone& backbone,
                                    const BaselineConfig& config);

/// Joint-training upper bound: one learner on all classes at once; reports
/// final accuracy only.
double run_baseline_joint(const Dataset& dataset,
                          const FrozenBackbone& backbone,
                          const BaselineConfig& config);

}  // namespace crcl
