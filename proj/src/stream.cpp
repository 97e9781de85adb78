#include "crcl/stream.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "crcl/errors.hpp"

namespace crcl {

namespace {

namespace fs = std::filesystem;

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

std::uint32_t read_be32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

struct IdxTensor {
  std::vector<std::uint32_t> dims;
  Mat data;  // rows = dim 0, cols = product of remaining dims
  bool was_ubyte = false;
};

IdxTensor load_idx(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  const std::uint32_t magic = read_be32(is);
  if ((magic >> 16) != 0) {
    throw ParseError(path + ": bad IDX magic at offset 0");
  }
  const int dtype = (magic >> 8) & 0xff;
  const int ndims = magic & 0xff;
  if (ndims < 1 || ndims > 3) {
    throw ParseError(path + ": unsupported IDX dimensionality " +
                     std::to_string(ndims));
  }
  IdxTensor t;
  std::uint64_t per_sample = 1;
  for (int i = 0; i < ndims; ++i) {
    t.dims.push_back(read_be32(is));
    if (i > 0) per_sample *= t.dims.back();
  }
  if (!is) throw ParseError(path + ": truncated IDX header");
  const std::uint64_t n = t.dims[0];
  t.data = Mat(n, per_sample);
  auto fill = [&](auto read_one) {
    for (std::uint64_t i = 0; i < n; ++i) {
      for (std::uint64_t j = 0; j < per_sample; ++j) {
        t.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            read_one();
      }
    }
  };
  switch (dtype) {
    case 0x08: {
      t.was_ubyte = true;
      fill([&]() {
        unsigned char v = 0;
        is.read(reinterpret_cast<char*>(&v), 1);
        return static_cast<double>(v);
      });
      break;
    }
    case 0x0D: {
      fill([&]() {
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        std::uint32_t u = (std::uint32_t(b[0]) << 24) |
                          (std::uint32_t(b[1]) << 16) |
                          (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
        float f;
        std::memcpy(&f, &u, 4);
        return static_cast<double>(f);
      });
      break;
    }
    case 0x0E: {
      fill([&]() {
        unsigned char b[8];
        is.read(reinterpret_cast<char*>(b), 8);
        std::uint64_t u = 0;
        for (int k = 0; k < 8; ++k) u = (u << 8) | b[k];
        double d;
        std::memcpy(&d, &u, 8);
        return d;
      });
      break;
    }
    default:
      throw ParseError(path + ": unsupported IDX dtype 0x" +
                       std::to_string(dtype));
  }
  if (!is) throw ParseError(path + ": truncated IDX payload");
  return t;
}

void load_csv(const std::string& path, Mat& inputs, std::vector<int>& labels,
              bool labels_inline) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    int col = 0;
    while (std::getline(ss, cell, ',')) {
      ++col;
      try {
        row.push_back(std::stod(trim(cell)));
      } catch (const std::exception&) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": column " +
                         std::to_string(col) + " is not a number");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": inconsistent column count");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError(path + ": no data rows");
  const std::size_t width = rows.front().size() - (labels_inline ? 1 : 0);
  inputs = Mat(rows.size(), width);
  if (labels_inline) labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (labels_inline) labels[i] = static_cast<int>(rows[i][0]);
    for (std::size_t j = 0; j < width; ++j) {
      inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          rows[i][j + (labels_inline ? 1 : 0)];
    }
  }
}

std::vector<int> labels_from_tensor(const IdxTensor& t, const std::string& path) {
  if (t.data.cols() != 1) {
    throw ParseError(path + ": label tensor must be one-dimensional");
  }
  std::vector<int> labels(t.data.rows());
  for (Eigen::Index i = 0; i < t.data.rows(); ++i) {
    labels[i] = static_cast<int>(t.data(i, 0));
  }
  return labels;
}

ImageShape parse_image_shape(const std::string& value) {
  ImageShape shape{0, 0, 1};
  std::stringstream ss(value);
  std::string part;
  int i = 0;
  while (std::getline(ss, part, 'x') && i < 3) {
    shape[i++] = std::stoi(part);
  }
  if (i < 2) throw ParseError("image_shape must be HxW or HxWxC");
  return shape;
}

void check_label_density(const std::vector<int>& train,
                         const std::vector<int>& test, int num_classes) {
  std::vector<bool> seen(num_classes, false);
  for (int y : train) seen[y] = true;
  for (int y : test) seen[y] = true;
  std::string missing;
  for (int c = 0; c < num_classes; ++c) {
    if (!seen[c]) missing += (missing.empty() ? "" : ", ") + std::to_string(c);
  }
  if (!missing.empty()) {
    throw LabelError("label gap: classes {" + missing + "} have no samples");
  }
}

int local_class_id(const TaskSpec& spec, int global_class) {
  int local = 0;
  for (const auto& group : spec.classes) {
    for (int cls : group) {
      if (cls == global_class) return local;
      ++local;
    }
  }
  throw LabelError("class " + std::to_string(global_class) +
                   " not covered by the task split");
}

TaskData select_samples(const Mat& inputs, const std::vector<int>& labels,
                        const TaskSpec& spec, int max_session,
                        const std::optional<ImageShape>& shape) {
  std::vector<bool> keep_class;
  int num_classes = 0;
  for (const auto& group : spec.classes) {
    for (int cls : group) num_classes = std::max(num_classes, cls + 1);
  }
  keep_class.assign(num_classes, false);
  for (int t = 0; t < max_session; ++t) {
    for (int cls : spec.classes[t]) keep_class[cls] = true;
  }
  std::vector<int> idx;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < num_classes && keep_class[labels[i]]) {
      idx.push_back(static_cast<int>(i));
    }
  }
  TaskData data;
  data.image_shape = shape;
  data.inputs = Mat(idx.size(), inputs.cols());
  data.labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    data.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(idx[i]);
    data.labels[i] = local_class_id(spec, labels[idx[i]]);
  }
  return data;
}

}  // namespace

Dataset load_dataset(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open manifest " + manifest_path);
  std::map<std::string, std::string> kv;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(manifest_path + ":" + std::to_string(line_no) +
                       ": expected key=value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }

  const std::string format = kv.count("format") ? kv["format"] : "idx";
  const fs::path base = fs::path(manifest_path).parent_path();
  auto resolve = [&](const std::string& key) -> std::string {
    auto it = kv.find(key);
    if (it == kv.end()) {
      throw ParseError(manifest_path + ": missing key " + key);
    }
    fs::path p(it->second);
    if (p.is_relative()) p = base / p;
    if (!fs::exists(p)) {
      throw IoError(manifest_path + ": file not found: " + p.string());
    }
    return p.string();
  };

  Dataset ds;
  bool was_ubyte = false;
  if (format == "idx") {
    IdxTensor train_x = load_idx(resolve("train_images"));
    IdxTensor test_x = load_idx(resolve("test_images"));
    ds.train_labels = labels_from_tensor(load_idx(resolve("train_labels")),
                                         kv["train_labels"]);
    ds.test_labels =
        labels_from_tensor(load_idx(resolve("test_labels")), kv["test_labels"]);
    was_ubyte = train_x.was_ubyte;
    if (train_x.dims.size() == 3) {
      ds.image_shape = ImageShape{static_cast<int>(train_x.dims[1]),
                                  static_cast<int>(train_x.dims[2]), 1};
    }
    ds.train_inputs = std::move(train_x.data);
    ds.test_inputs = std::move(test_x.data);
  } else if (format == "csv") {
    const bool inline_labels = !kv.count("train_labels");
    load_csv(resolve("train_images"), ds.train_inputs, ds.train_labels,
             inline_labels);
    load_csv(resolve("test_images"), ds.test_inputs, ds.test_labels,
             inline_labels);
    if (!inline_labels) {
      Mat tmp;
      std::vector<int> unused;
      load_csv(resolve("train_labels"), tmp, unused, false);
      ds.train_labels.resize(tmp.rows());
      for (Eigen::Index i = 0; i < tmp.rows(); ++i) {
        ds.train_labels[i] = static_cast<int>(tmp(i, 0));
      }
      load_csv(resolve("test_labels"), tmp, unused, false);
      ds.test_labels.resize(tmp.rows());
      for (Eigen::Index i = 0; i < tmp.rows(); ++i) {
        ds.test_labels[i] = static_cast<int>(tmp(i, 0));
      }
    }
  } else if (format == "embed") {
    ds.train_inputs = read_embedding_file(resolve("train_images"));
    ds.test_inputs = read_embedding_file(resolve("test_images"));
    ds.train_labels = labels_from_tensor(load_idx(resolve("train_labels")),
                                         kv["train_labels"]);
    ds.test_labels =
        labels_from_tensor(load_idx(resolve("test_labels")), kv["test_labels"]);
  } else {
    throw ParseError(manifest_path + ": unknown format '" + format + "'");
  }

  if (ds.train_inputs.rows() != static_cast<Eigen::Index>(ds.train_labels.size()) ||
      ds.test_inputs.rows() != static_cast<Eigen::Index>(ds.test_labels.size())) {
    throw ParseError(manifest_path + ": image/label counts disagree");
  }
  if (kv.count("image_shape")) {
    ds.image_shape = parse_image_shape(kv["image_shape"]);
  }

  int max_label = -1;
  for (int y : ds.train_labels) max_label = std::max(max_label, y);
  for (int y : ds.test_labels) max_label = std::max(max_label, y);
  ds.num_classes = max_label + 1;
  check_label_density(ds.train_labels, ds.test_labels, ds.num_classes);

  if (was_ubyte) {
    ds.train_inputs /= 255.0;
    ds.test_inputs /= 255.0;
  }
  return ds;
}

void standardize(Dataset& dataset) {
  const double mean = dataset.train_inputs.mean();
  const double var =
      (dataset.train_inputs.array() - mean).square().mean();
  const double stddev = std::sqrt(std::max(var, 1e-12));
  dataset.train_inputs = (dataset.train_inputs.array() - mean) / stddev;
  dataset.test_inputs = (dataset.test_inputs.array() - mean) / stddev;
}

TaskOrder parse_task_order(const std::string& name) {
  if (name == "given") return TaskOrder::given;
  if (name == "reversed") return TaskOrder::reversed;
  if (name == "shuffled") return TaskOrder::shuffled;
  throw InvalidParameterError("unknown task order '" + name + "'");
}

std::string task_order_name(TaskOrder order) {
  switch (order) {
    case TaskOrder::given: return "given";
    case TaskOrder::reversed: return "reversed";
    case TaskOrder::shuffled: return "shuffled";
  }
  return "given";
}

TaskSpec split_tasks(int num_classes, int task_count, TaskOrder order,
                     std::uint64_t seed) {
  if (task_count < 1 || task_count > num_classes) {
    throw InvalidParameterError(
        "split_tasks: task count must be in [1, num_classes]");
  }
  std::vector<int> classes(num_classes);
  std::iota(classes.begin(), classes.end(), 0);
  if (order == TaskOrder::shuffled) {
    std::mt19937_64 rng(seed);
    std::shuffle(classes.begin(), classes.end(), rng);
  }
  TaskSpec spec;
  spec.task_count = task_count;
  const int base = num_classes / task_count;
  const int remainder = num_classes % task_count;
  int cursor = 0;
  for (int t = 0; t < task_count; ++t) {
    const int size = base + (t < remainder ? 1 : 0);
    spec.classes.emplace_back(classes.begin() + cursor,
                              classes.begin() + cursor + size);
    cursor += size;
  }
  if (order == TaskOrder::reversed) {
    std::reverse(spec.classes.begin(), spec.classes.end());
  }
  return spec;
}

TaskData task_train_split(const Dataset& dataset, const TaskSpec& spec, int t) {
  if (t < 1 || t > spec.task_count) {
    throw InvalidParameterError("task_train_split: session out of range");
  }
  TaskSpec single;
  single.task_count = spec.task_count;
  single.classes = spec.classes;
  TaskData all = select_samples(dataset.train_inputs, dataset.train_labels,
                                single, t, dataset.image_shape);
  // Keep only the classes introduced at session t.
  int first_local = 0;
  for (int s = 0; s + 1 < t; ++s) {
    first_local += static_cast<int>(spec.classes[s].size());
  }
  const int last_local =
      first_local + static_cast<int>(spec.classes[t - 1].size());
  std::vector<int> idx;
  for (std::size_t i = 0; i < all.labels.size(); ++i) {
    if (all.labels[i] >= first_local && all.labels[i] < last_local) {
      idx.push_back(static_cast<int>(i));
    }
  }
  TaskData data;
  data.image_shape = dataset.image_shape;
  data.inputs = Mat(idx.size(), dataset.train_inputs.cols());
  data.labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    data.inputs.row(static_cast<Eigen::Index>(i)) = all.inputs.row(idx[i]);
    data.labels[i] = all.labels[idx[i]];
  }
  return data;
}

TaskData cumulative_test_split(const Dataset& dataset, const TaskSpec& spec,
                               int t) {
  if (t < 1 || t > spec.task_count) {
    throw InvalidParameterError("cumulative_test_split: session out of range");
  }
  return select_samples(dataset.test_inputs, dataset.test_labels, spec, t,
                        dataset.image_shape);
}

double evaluate(const BatchPredictFn& predict_fn, const TaskData& test) {
  if (test.size() == 0) {
    throw EmptyInputError("evaluate: empty test set");
  }
  constexpr Eigen::Index kChunk = 512;
  long correct = 0;
  for (Eigen::Index begin = 0; begin < test.size(); begin += kChunk) {
    const Eigen::Index rows = std::min(kChunk, test.size() - begin);
    std::vector<int> pred = predict_fn(test.inputs.middleRows(begin, rows));
    if (static_cast<Eigen::Index>(pred.size()) != rows) {
      throw ShapeError("evaluate: predict_fn returned wrong count");
    }
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (pred[i] == test.labels[begin + i]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) /
         static_cast<double>(test.size());
}

std::pair<double, double> metrics(const std::vector<double>& acc_list) {
  if (acc_list.empty()) {
    throw EmptyInputError("metrics: empty accuracy list");
  }
  const double avg = std::accumulate(acc_list.begin(), acc_list.end(), 0.0) /
                     static_cast<double>(acc_list.size());
  return {avg, acc_list.back()};
}

namespace {

// Gradient finetuning of adapters plus classifier head on one task.
void finetune_task(LearnerState& state, const FrozenBackbone& backbone,
                   const TaskData& task, const TrainConfig& config,
                   int epochs) {
  std::mt19937_64 rng(config.seed);
  struct Velocity {
    std::vector<Adapter> adapters;
    Mat classifier;
  } vel;
  vel.adapters.resize(state.adapters.blocks.size());
  for (std::size_t i = 0; i < vel.adapters.size(); ++i) {
    vel.adapters[i].w_down = Mat::Zero(state.adapters.blocks[i].w_down.rows(),
                                       state.adapters.blocks[i].w_down.cols());
    vel.adapters[i].w_up = Mat::Zero(state.adapters.blocks[i].w_up.rows(),
                                     state.adapters.blocks[i].w_up.cols());
  }
  vel.classifier = Mat::Zero(state.classifier.rows(), state.classifier.cols());

  std::vector<int> order(task.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double lr =
        config.lr_init * 0.5 * (1.0 + std::cos(M_PI * epoch / epochs));
    std::shuffle(order.begin(), order.end(), rng);
    for (int begin = 0; begin < static_cast<int>(order.size());
         begin += config.batch_size) {
      const int end = std::min<int>(begin + config.batch_size,
                                    static_cast<int>(order.size()));
      Mat x(end - begin, task.inputs.cols());
      std::vector<int> y(end - begin);
      for (int i = begin; i < end; ++i) {
        x.row(i - begin) = task.inputs.row(order[i]);
        y[i - begin] = task.labels[order[i]];
      }
      if (task.image_shape) x = augment_batch(x, *task.image_shape, rng);

      ForwardTrace trace;
      Mat emb = backbone.embed(x, state.adapters, &trace);
      CeResult ce = loss_ce(state.classifier, emb, y);
      AdapterSet grads =
          backbone.backward_adapters(trace, state.adapters, ce.d_embeddings);
      for (std::size_t i = 0; i < vel.adapters.size(); ++i) {
        vel.adapters[i].w_down = config.momentum * vel.adapters[i].w_down +
                                 grads.blocks[i].w_down;
        vel.adapters[i].w_up =
            config.momentum * vel.adapters[i].w_up + grads.blocks[i].w_up;
        state.adapters.blocks[i].w_down -= lr * vel.adapters[i].w_down;
        state.adapters.blocks[i].w_up -= lr * vel.adapters[i].w_up;
      }
      ++state.adapters.version;
      vel.classifier = config.momentum * vel.classifier + ce.d_classifier;
      state.classifier -= lr * vel.classifier;
    }
  }
}

std::vector<int> argmax_rows(const Mat& logits) {
  std::vector<int> out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace

SessionResult run_baseline_finetune(const Dataset& dataset, const TaskSpec& spec,
                                    const FrozenBackbone& backbone,
                                    const BaselineConfig& config) {
  SessionResult result;
  LearnerState state;
  int classes_seen = 0;
  for (int t = 1; t <= spec.task_count; ++t) {
    TaskData task = task_train_split(dataset, spec, t);
    if (task.size() == 0) throw EmptyInputError("finetune: empty task");
    classes_seen += static_cast<int>(spec.classes[t - 1].size());
    if (t == 1) {
      TrainConfig cfg = config.train;
      state = train_session_one(backbone, task, cfg, config.bottleneck_dim);
    } else {
      // Expand the head with imprinted columns for the new classes, then
      // gradient-train adapters and head together.
      Mat emb = backbone.embed(task.inputs, state.adapters);
      std::map<int, std::vector<Vec>> per_class;
      for (std::size_t i = 0; i < task.labels.size(); ++i) {
        per_class[task.labels[i]].push_back(
            emb.row(static_cast<Eigen::Index>(i)));
      }
      imprint_columns(state.classifier, per_class);
      TrainConfig cfg = config.train;
      cfg.seed = config.train.seed + static_cast<std::uint64_t>(t);
      finetune_task(state, backbone, task, cfg, config.train.epochs_later);
    }
    TaskData test = cumulative_test_split(dataset, spec, t);
    result.session_accuracy.push_back(evaluate(
        [&](const Mat& x) {
          return argmax_rows(backbone.embed(x, state.adapters) *
                             state.classifier);
        },
        test));
  }
  std::tie(result.acc_avg, result.acc_last) = metrics(result.session_accuracy);
  return result;
}

double run_baseline_joint(const Dataset& dataset, const FrozenBackbone& backbone,
                          const BaselineConfig& config) {
  TaskSpec spec = split_tasks(dataset.num_classes, 1, TaskOrder::given, 0);
  SessionResult r = run_baseline_finetune(dataset, spec, backbone, config);
  return r.acc_last;
}

}  // namespace crcl
