#include "crcl/learners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "crcl/errors.hpp"

namespace crcl {

namespace {

Vec normalized_or_zero(const Vec& v) {
  const double n = v.norm();
  return n > 0.0 ? Vec(v / n) : v;
}

std::vector<std::vector<Vec>> group_by_class(const Mat& embeddings,
                                             const std::vector<int>& labels,
                                             int num_classes) {
  std::vector<std::vector<Vec>> groups(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    groups[labels[i]].push_back(embeddings.row(static_cast<Eigen::Index>(i)));
  }
  return groups;
}

int infer_num_classes(const std::vector<int>& labels) {
  int max_label = -1;
  for (int y : labels) {
    if (y < 0) throw LabelError("negative label " + std::to_string(y));
    max_label = std::max(max_label, y);
  }
  return max_label + 1;
}

double cosine_lr(double lr_init, int epoch, int total_epochs) {
  return lr_init * 0.5 * (1.0 + std::cos(M_PI * epoch / total_epochs));
}

struct SgdAdapterState {
  std::vector<Adapter> velocity;

  explicit SgdAdapterState(const AdapterSet& shape) {
    velocity.resize(shape.blocks.size());
    for (std::size_t i = 0; i < shape.blocks.size(); ++i) {
      velocity[i].w_down = Mat::Zero(shape.blocks[i].w_down.rows(),
                                     shape.blocks[i].w_down.cols());
      velocity[i].w_up =
          Mat::Zero(shape.blocks[i].w_up.rows(), shape.blocks[i].w_up.cols());
    }
  }

  void step(AdapterSet& params, const AdapterSet& grads, double lr,
            double momentum) {
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
      velocity[i].w_down =
          momentum * velocity[i].w_down + grads.blocks[i].w_down;
      velocity[i].w_up = momentum * velocity[i].w_up + grads.blocks[i].w_up;
      params.blocks[i].w_down -= lr * velocity[i].w_down;
      params.blocks[i].w_up -= lr * velocity[i].w_up;
    }
    ++params.version;
  }
};

Mat gather_rows(const Mat& m, const std::vector<int>& idx, int begin, int end) {
  Mat out(end - begin, m.cols());
  for (int i = begin; i < end; ++i) {
    out.row(i - begin) = m.row(idx[i]);
  }
  return out;
}

void reimprint_from_task(Mat& classifier, const FrozenBackbone& backbone,
                         const AdapterSet& adapters, const TaskData& task) {
  Mat emb = backbone.embed(task.inputs, adapters);
  std::map<int, std::vector<Vec>> per_class;
  for (std::size_t i = 0; i < task.labels.size(); ++i) {
    per_class[task.labels[i]].push_back(emb.row(static_cast<Eigen::Index>(i)));
  }
  imprint_columns(classifier, per_class);
}

}  // namespace

Mat imprint_classifier(
    const std::vector<std::vector<Vec>>& per_class_embeddings) {
  if (per_class_embeddings.empty()) {
    throw EmptyInputError("imprint_classifier: no classes");
  }
  const Eigen::Index dim = [&]() -> Eigen::Index {
    for (const auto& cls : per_class_embeddings) {
      if (!cls.empty()) return cls.front().size();
    }
    throw EmptyInputError("imprint_classifier: all classes empty");
  }();
  Mat classifier(dim, static_cast<Eigen::Index>(per_class_embeddings.size()));
  for (std::size_t j = 0; j < per_class_embeddings.size(); ++j) {
    const auto& cls = per_class_embeddings[j];
    if (cls.empty()) {
      throw EmptyInputError("imprint_classifier: missing prototype for class " +
                            std::to_string(j));
    }
    Vec mean = Vec::Zero(dim);
    for (const Vec& e : cls) {
      mean += normalized_or_zero(e);
    }
    mean /= static_cast<double>(cls.size());
    classifier.col(static_cast<Eigen::Index>(j)) = normalized_or_zero(mean);
  }
  return classifier;
}

void imprint_columns(
    Mat& classifier,
    const std::map<int, std::vector<Vec>>& per_class_embeddings) {
  if (per_class_embeddings.empty()) return;
  const int max_class = per_class_embeddings.rbegin()->first;
  const Eigen::Index dim = classifier.rows() > 0
                               ? classifier.rows()
                               : per_class_embeddings.begin()->second.front().size();
  if (max_class >= classifier.cols()) {
    Mat grown = Mat::Zero(dim, max_class + 1);
    grown.leftCols(classifier.cols()) = classifier;
    classifier = std::move(grown);
  }
  for (const auto& [cls, embeddings] : per_class_embeddings) {
    if (embeddings.empty()) {
      throw EmptyInputError("imprint_columns: missing prototype for class " +
                            std::to_string(cls));
    }
    Vec mean = Vec::Zero(dim);
    for (const Vec& e : embeddings) {
      mean += normalized_or_zero(e);
    }
    mean /= static_cast<double>(embeddings.size());
    classifier.col(cls) = normalized_or_zero(mean);
  }
}

CeResult loss_ce(const Mat& classifier, const Mat& embeddings,
                 const std::vector<int>& labels) {
  const Eigen::Index n = embeddings.rows();
  const Eigen::Index num_classes = classifier.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw ShapeError("loss_ce: batch/label size mismatch");
  }
  if (embeddings.cols() != classifier.rows()) {
    throw ShapeError("loss_ce: embedding width does not match classifier");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw LabelError("loss_ce: label " + std::to_string(y) +
                       " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  Mat logits = embeddings * classifier;  // n x C
  Mat d_logits(n, num_classes);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::RowVectorXd shifted = (logits.row(i).array() - m).exp();
    const double z = shifted.sum();
    loss += std::log(z) + m - logits(i, labels[i]);
    d_logits.row(i) = shifted / z;
    d_logits(i, labels[i]) -= 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  loss *= inv_n;
  d_logits *= inv_n;
  CeResult result;
  result.loss = loss;
  result.d_embeddings = d_logits * classifier.transpose();
  result.d_classifier = embeddings.transpose() * d_logits;
  return result;
}

RadicalLossResult loss_radical(const Mat& classifier_radical,
                               const Mat& embeddings_radical,
                               const Mat& embeddings_conservative,
                               const std::vector<int>& labels) {
  if (embeddings_radical.rows() != embeddings_conservative.rows() ||
      embeddings_radical.cols() != embeddings_conservative.cols()) {
    throw ShapeError("loss_radical: embedding batches misaligned");
  }
  CeResult own = loss_ce(classifier_radical, embeddings_radical, labels);
  CeResult cross = loss_ce(classifier_radical, embeddings_conservative, labels);
  RadicalLossResult result;
  result.loss = own.loss + cross.loss;
  result.d_embeddings_radical = std::move(own.d_embeddings);
  result.d_classifier = own.d_classifier + cross.d_classifier;
  return result;
}

LearnerState train_session_one(const FrozenBackbone& backbone,
                               const TaskData& task, const TrainConfig& config,
                               int bottleneck_dim) {
  if (task.size() == 0) {
    throw EmptyInputError("train_session_one: empty task");
  }
  const int num_classes = infer_num_classes(task.labels);
  std::mt19937_64 rng(config.seed);

  LearnerState state;
  state.role = Role::conservative;
  state.adapters = make_adapters(backbone.config(), bottleneck_dim, rng);
  reimprint_from_task(state.classifier, backbone, state.adapters, task);

  SgdAdapterState sgd(state.adapters);
  std::vector<int> order(task.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs_first; ++epoch) {
    const double lr = cosine_lr(config.lr_init, epoch, config.epochs_first);
    std::shuffle(order.begin(), order.end(), rng);
    for (int begin = 0; begin < static_cast<int>(order.size());
         begin += config.batch_size) {
      const int end = std::min<int>(begin + config.batch_size,
                                    static_cast<int>(order.size()));
      Mat x = gather_rows(task.inputs, order, begin, end);
      if (task.image_shape) {
        x = augment_batch(x, *task.image_shape, rng);
      }
      std::vector<int> y(end - begin);
      for (int i = begin; i < end; ++i) y[i - begin] = task.labels[order[i]];

      ForwardTrace trace;
      Mat emb = backbone.embed(x, state.adapters, &trace);
      CeResult ce = loss_ce(state.classifier, emb, y);
      AdapterSet grads =
          backbone.backward_adapters(trace, state.adapters, ce.d_embeddings);
      sgd.step(state.adapters, grads, lr, config.momentum);
    }
    reimprint_from_task(state.classifier, backbone, state.adapters, task);
  }
  return state;
}

AdapterSet forward_transfer(const LearnerState& conservative) {
  return conservative.adapters;
}

void train_radical(LearnerState& radical, const LearnerState& conservative,
                   const FrozenBackbone& backbone, const TaskData& task,
                   const TrainConfig& config, int total_classes) {
  if (task.size() == 0) {
    throw EmptyInputError("train_radical: empty task");
  }
  if (radical.classifier.cols() != total_classes) {
    throw StateError("train_radical: classifier has " +
                     std::to_string(radical.classifier.cols()) +
                     " columns, expected expansion to " +
                     std::to_string(total_classes));
  }
  std::mt19937_64 rng(config.seed);
  SgdAdapterState sgd(radical.adapters);
  Mat classifier_velocity =
      Mat::Zero(radical.classifier.rows(), radical.classifier.cols());
  std::vector<int> order(task.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs_later; ++epoch) {
    const double lr = cosine_lr(config.lr_init, epoch, config.epochs_later);
    std::shuffle(order.begin(), order.end(), rng);
    for (int begin = 0; begin < static_cast<int>(order.size());
         begin += config.batch_size) {
      const int end = std::min<int>(begin + config.batch_size,
                                    static_cast<int>(order.size()));
      Mat x = gather_rows(task.inputs, order, begin, end);
      if (task.image_shape) {
        x = augment_batch(x, *task.image_shape, rng);
      }
      std::vector<int> y(end - begin);
      for (int i = begin; i < end; ++i) y[i - begin] = task.labels[order[i]];

      Mat emb_c = backbone.embed(x, conservative.adapters);
      ForwardTrace trace;
      Mat emb_r = backbone.embed(x, radical.adapters, &trace);
      RadicalLossResult rl =
          loss_radical(radical.classifier, emb_r, emb_c, y);
      AdapterSet grads = backbone.backward_adapters(trace, radical.adapters,
                                                    rl.d_embeddings_radical);
      sgd.step(radical.adapters, grads, lr, config.momentum);
      classifier_velocity =
          config.momentum * classifier_velocity + rl.d_classifier;
      radical.classifier -= lr * classifier_velocity;
    }
  }
}

AdapterSet consolidate_ema(const AdapterSet& conservative,
                           const AdapterSet& radical,
                           const ConsolidationConfig& cfg) {
  if (cfg.alpha < 0.0 || cfg.alpha > 1.0) {
    throw InvalidParameterError("consolidate_ema: alpha outside [0,1]");
  }
  if (!conservative.same_shape(radical)) {
    throw ShapeError("consolidate_ema: adapter shapes differ");
  }
  if (cfg.alpha == 0.0) return radical;
  if (cfg.alpha == 1.0) return conservative;

  auto blend = [&](const Mat& c, const Mat& r) -> Mat {
    Mat mixed = cfg.alpha * c + (1.0 - cfg.alpha) * r;
    // Clamp so each entry stays in the closed interval of its sources even
    // under rounding.
    return mixed.cwiseMax(c.cwiseMin(r)).cwiseMin(c.cwiseMax(r));
  };
  AdapterSet out;
  out.blocks.resize(conservative.blocks.size());
  for (std::size_t i = 0; i < conservative.blocks.size(); ++i) {
    out.blocks[i].w_down =
        blend(conservative.blocks[i].w_down, radical.blocks[i].w_down);
    out.blocks[i].w_up =
        blend(conservative.blocks[i].w_up, radical.blocks[i].w_up);
  }
  return out;
}

Mat augment_batch(const Mat& batch, const ImageShape& shape,
                  std::mt19937_64& rng) {
  const int height = shape[0];
  const int width = shape[1];
  const int channels = shape[2];
  if (batch.cols() != static_cast<Eigen::Index>(height) * width * channels) {
    throw ShapeError("augment_batch: row width does not match image shape");
  }
  std::uniform_int_distribution<int> flip_dist(0, 1);
  std::uniform_int_distribution<int> angle_dist(0, 2);
  constexpr double kDeg = M_PI / 180.0;
  const double angles[3] = {-10.0 * kDeg, 0.0, 10.0 * kDeg};
  const double cy = 0.5 * (height - 1);
  const double cx = 0.5 * (width - 1);

  Mat out(batch.rows(), batch.cols());
  auto at = [&](const Mat& m, Eigen::Index row, int h, int w, int c) {
    return m(row, (static_cast<Eigen::Index>(h) * width + w) * channels + c);
  };
  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    const bool flip = flip_dist(rng) == 1;
    const double angle = angles[angle_dist(rng)];
    const double ca = std::cos(angle);
    const double sa = std::sin(angle);
    for (int h = 0; h < height; ++h) {
      for (int w = 0; w < width; ++w) {
        // Inverse rotation about the image center, bilinear sampling.
        const double sy = cy + (h - cy) * ca - (w - cx) * sa;
        const double sx = cx + (h - cy) * sa + (w - cx) * ca;
        const int h0 = static_cast<int>(std::floor(sy));
        const int w0 = static_cast<int>(std::floor(sx));
        const double fy = sy - h0;
        const double fx = sx - w0;
        for (int c = 0; c < channels; ++c) {
          double v = 0.0;
          for (int dh = 0; dh <= 1; ++dh) {
            for (int dw = 0; dw <= 1; ++dw) {
              const int hh = h0 + dh;
              const int ww = w0 + dw;
              if (hh < 0 || hh >= height || ww < 0 || ww >= width) continue;
              const double weight =
                  (dh ? fy : 1.0 - fy) * (dw ? fx : 1.0 - fx);
              v += weight * at(batch, i, hh, ww, c);
            }
          }
          const int out_w = flip ? width - 1 - w : w;
          out(i, (static_cast<Eigen::Index>(h) * width + out_w) * channels + c) = v;
        }
      }
    }
  }
  return out;
}

}  // namespace crcl
