#include "crcl/experiment.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "crcl/analytic.hpp"
#include "crcl/checkpoint.hpp"
#include "crcl/errors.hpp"

namespace crcl {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

int eval_threads() {
  const char* env = std::getenv("CRCL_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n > 0 ? n : 1;
}

// Deterministic row-partitioned parallel embedding; identical output for any
// thread count.
Mat embed_parallel(const FrozenBackbone& backbone, const AdapterSet& adapters,
                   const Mat& inputs) {
  const int threads =
      std::min<int>(eval_threads(), std::max<Eigen::Index>(inputs.rows(), 1));
  if (threads <= 1) {
    return backbone.embed(inputs, adapters);
  }
  Mat out(inputs.rows(), backbone.config().embed_dim);
  std::vector<std::thread> pool;
  const Eigen::Index chunk = (inputs.rows() + threads - 1) / threads;
  for (int w = 0; w < threads; ++w) {
    const Eigen::Index begin = w * chunk;
    if (begin >= inputs.rows()) break;
    const Eigen::Index rows = std::min(chunk, inputs.rows() - begin);
    pool.emplace_back([&, begin, rows]() {
      out.middleRows(begin, rows) =
          backbone.embed(inputs.middleRows(begin, rows), adapters);
    });
  }
  for (auto& t : pool) t.join();
  return out;
}

std::string git_describe() {
  FILE* pipe = popen("git describe --always --dirty 2>/dev/null", "r");
  if (!pipe) return "unknown";
  char buf[256];
  std::string out;
  while (fgets(buf, sizeof buf, pipe)) out += buf;
  pclose(pipe);
  out = trim(out);
  return out.empty() ? "unknown" : out;
}

std::string serialize_rng(const std::mt19937_64& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

void restore_rng(std::mt19937_64& rng, const std::string& state) {
  std::istringstream ss(state);
  ss >> rng;
}

template <typename Fn>
auto with_context(int session, const std::string& op, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error("session " + std::to_string(session) + ", operation " + op +
                ": " + e.what());
  }
}

std::map<int, std::vector<Vec>> group_new_classes(const Mat& embeddings,
                                                  const std::vector<int>& labels) {
  std::map<int, std::vector<Vec>> per_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    per_class[labels[i]].push_back(
        embeddings.row(static_cast<Eigen::Index>(i)).transpose());
  }
  return per_class;
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

Method parse_method(const std::string& name) {
  if (name == "bicrcl") return Method::bicrcl;
  if (name == "finetune") return Method::finetune;
  if (name == "joint") return Method::joint;
  throw InvalidParameterError("unknown method '" + name + "'");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::bicrcl: return "bicrcl";
    case Method::finetune: return "finetune";
    case Method::joint: return "joint";
  }
  return "bicrcl";
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  ExperimentConfig cfg;
  std::string section;
  std::string line;
  int line_no = 0;
  auto bad = [&](const std::string& what) {
    return ParseError(path + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(is, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw bad("unterminated section header");
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw bad("expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto as_int = [&]() {
      try {
        return std::stoi(value);
      } catch (const std::exception&) {
        throw bad(key + ": not an integer");
      }
    };
    auto as_double = [&]() {
      try {
        return std::stod(value);
      } catch (const std::exception&) {
        throw bad(key + ": not a number");
      }
    };
    auto as_u64 = [&]() {
      try {
        return static_cast<std::uint64_t>(std::stoull(value));
      } catch (const std::exception&) {
        throw bad(key + ": not an unsigned integer");
      }
    };
    auto as_bool = [&]() {
      if (value == "true" || value == "1") return true;
      if (value == "false" || value == "0") return false;
      throw bad(key + ": expected true/false");
    };

    const std::string full = section + "." + key;
    if (full == "stream.manifest") cfg.manifest = value;
    else if (full == "stream.tasks") cfg.tasks = as_int();
    else if (full == "stream.order") cfg.order = parse_task_order(value);
    else if (full == "stream.seed") cfg.seed = as_u64();
    else if (full == "stream.method") cfg.method = parse_method(value);
    else if (full == "stream.output") cfg.output_dir = value;
    else if (full == "stream.emit_predictions") cfg.emit_predictions = as_bool();
    else if (full == "backbone.input_dim") cfg.backbone.input_dim = as_int();
    else if (full == "backbone.hidden_dim") cfg.backbone.hidden_dim = as_int();
    else if (full == "backbone.embed_dim") cfg.backbone.embed_dim = as_int();
    else if (full == "backbone.num_blocks") cfg.backbone.num_blocks = as_int();
    else if (full == "backbone.bottleneck_dim") cfg.bottleneck_dim = as_int();
    else if (full == "backbone.weights_file") cfg.backbone_weights = value;
    else if (full == "train.batch_size") cfg.train.batch_size = as_int();
    else if (full == "train.epochs_first") cfg.train.epochs_first = as_int();
    else if (full == "train.epochs_later") cfg.train.epochs_later = as_int();
    else if (full == "train.lr_init") cfg.train.lr_init = as_double();
    else if (full == "train.momentum") cfg.train.momentum = as_double();
    else if (full == "consolidation.alpha") cfg.consolidation.alpha = as_double();
    else if (full == "analytic.expansion_dim") cfg.expansion_dim = as_int();
    else if (full == "analytic.beta") cfg.beta = as_double();
    else if (full == "fusion.tau") cfg.fusion.tau = as_double();
    else if (full == "fusion.lambda") cfg.fusion.lambda = as_double();
    else throw bad("unknown key '" + full + "'");
  }
  return cfg;
}

std::vector<std::string> validate_config(const ExperimentConfig& cfg) {
  std::vector<std::string> errors;
  if (cfg.manifest.empty()) {
    errors.push_back("stream.manifest: missing manifest path");
  } else if (!fs::exists(cfg.manifest)) {
    errors.push_back("stream.manifest: file not found: " + cfg.manifest);
  }
  if (cfg.tasks < 1) errors.push_back("stream.tasks: must be >= 1");
  if (cfg.backbone.input_dim < 0) {
    errors.push_back("backbone.input_dim: must be >= 0 (0 = infer)");
  }
  if (cfg.backbone.hidden_dim < 1) {
    errors.push_back("backbone.hidden_dim: must be >= 1");
  }
  if (cfg.backbone.embed_dim < 1) {
    errors.push_back("backbone.embed_dim: must be >= 1");
  }
  if (cfg.backbone.num_blocks < 1) {
    errors.push_back("backbone.num_blocks: must be >= 1");
  }
  if (cfg.bottleneck_dim < 1 || cfg.bottleneck_dim >= cfg.backbone.hidden_dim) {
    errors.push_back(
        "backbone.bottleneck_dim: must satisfy 1 <= k_hat < hidden_dim");
  }
  if (!cfg.backbone_weights.empty() && !fs::exists(cfg.backbone_weights)) {
    errors.push_back("backbone.weights_file: file not found: " +
                     cfg.backbone_weights);
  }
  if (cfg.train.batch_size < 1) errors.push_back("train.batch_size: must be >= 1");
  if (cfg.train.epochs_first < 0) {
    errors.push_back("train.epochs_first: must be >= 0");
  }
  if (cfg.train.epochs_later < 0) {
    errors.push_back("train.epochs_later: must be >= 0");
  }
  if (!(cfg.train.lr_init > 0.0)) errors.push_back("train.lr_init: must be > 0");
  if (cfg.train.momentum < 0.0 || cfg.train.momentum >= 1.0) {
    errors.push_back("train.momentum: must be in [0, 1)");
  }
  if (cfg.consolidation.alpha < 0.0 || cfg.consolidation.alpha > 1.0) {
    errors.push_back("consolidation.alpha: must be in [0, 1]");
  }
  if (cfg.expansion_dim < 0) {
    errors.push_back("analytic.expansion_dim: must be >= 0 (0 = 4*embed_dim)");
  }
  if (cfg.expansion_dim > 0 && cfg.expansion_dim <= cfg.backbone.embed_dim) {
    errors.push_back("analytic.expansion_dim: must exceed embed_dim");
  }
  if (cfg.beta < 0.0) errors.push_back("analytic.beta: must be >= 0 (0 = grid)");
  if (!(cfg.fusion.tau > 0.0)) errors.push_back("fusion.tau: must be > 0");
  if (cfg.fusion.lambda < 0.0) errors.push_back("fusion.lambda: must be >= 0");
  return errors;
}

std::string config_to_string(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "[stream]\n";
  os << "manifest = " << cfg.manifest << "\n";
  os << "tasks = " << cfg.tasks << "\n";
  os << "order = " << task_order_name(cfg.order) << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "method = " << method_name(cfg.method) << "\n";
  os << "output = " << cfg.output_dir << "\n";
  os << "emit_predictions = " << (cfg.emit_predictions ? "true" : "false")
     << "\n";
  os << "[backbone]\n";
  os << "input_dim = " << cfg.backbone.input_dim << "\n";
  os << "hidden_dim = " << cfg.backbone.hidden_dim << "\n";
  os << "embed_dim = " << cfg.backbone.embed_dim << "\n";
  os << "num_blocks = " << cfg.backbone.num_blocks << "\n";
  os << "bottleneck_dim = " << cfg.bottleneck_dim << "\n";
  if (!cfg.backbone_weights.empty()) {
    os << "weights_file = " << cfg.backbone_weights << "\n";
  }
  os << "[train]\n";
  os << "batch_size = " << cfg.train.batch_size << "\n";
  os << "epochs_first = " << cfg.train.epochs_first << "\n";
  os << "epochs_later = " << cfg.train.epochs_later << "\n";
  os << "lr_init = " << format_double(cfg.train.lr_init) << "\n";
  os << "momentum = " << format_double(cfg.train.momentum) << "\n";
  os << "[consolidation]\n";
  os << "alpha = " << format_double(cfg.consolidation.alpha) << "\n";
  os << "[analytic]\n";
  os << "expansion_dim = " << cfg.expansion_dim << "\n";
  os << "beta = " << format_double(cfg.beta) << "\n";
  os << "[fusion]\n";
  os << "tau = " << format_double(cfg.fusion.tau) << "\n";
  os << "lambda = " << format_double(cfg.fusion.lambda) << "\n";
  return os.str();
}

namespace {

struct RunState {
  LearnerState conservative;
  LearnerState radical;
  bool has_radical = false;
  SuffStats stats_c;
  SuffStats stats_r;
  AnalyticClassifier clf_c;
  AnalyticClassifier clf_r;
  double beta = 1.0;
  bool beta_fallback = false;
  int classes_seen = 0;
  std::mt19937_64 master_rng;
  std::vector<double> accs;
};

void emit_prediction_csv(const std::string& path,
                         const std::vector<FusedPrediction>& preds,
                         const Mat& z_c, const Mat& z_r, double tau) {
  std::ofstream os(path);
  os << "sample_id,y_star,gate,d_sym,alpha_c,alpha_r,top1_prob_c,top1_prob_r\n";
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    const double conf_c = confidence(
        softmax_temp(z_c.row(static_cast<Eigen::Index>(i)).transpose(), tau));
    const double conf_r = confidence(
        softmax_temp(z_r.row(static_cast<Eigen::Index>(i)).transpose(), tau));
    os << i << ',' << p.y_star << ',' << (p.gate ? 1 : 0) << ','
       << format_double(p.d_sym) << ',' << format_double(p.alpha_conservative)
       << ',' << format_double(p.alpha_radical) << ','
       << format_double(conf_c) << ',' << format_double(conf_r) << "\n";
  }
}

void write_report(const ExperimentConfig& cfg, const SessionResult& sessions,
                  bool has_avg, double beta, bool beta_fallback,
                  const TaskSpec& spec, const std::string& json_path,
                  const std::string& csv_path) {
  json report;
  report["method"] = method_name(cfg.method);
  report["seed"] = cfg.seed;
  report["git_describe"] = git_describe();
  report["config_echo"] = config_to_string(cfg);
  json class_order = json::array();
  for (const auto& group : spec.classes) {
    class_order.push_back(group);
  }
  report["class_order"] = class_order;
  json acc = json::array();
  for (double a : sessions.session_accuracy) acc.push_back(a);
  report["session_accuracy"] = acc;
  if (has_avg) {
    report["acc_avg"] = sessions.acc_avg;
  } else {
    report["acc_avg"] = nullptr;  // joint training reports the final number only
  }
  report["acc_last"] = sessions.acc_last;
  if (cfg.method == Method::bicrcl) {
    report["beta"] = beta;
    report["beta_fallback"] = beta_fallback;
  }
  std::ofstream js(json_path);
  js << report.dump(2) << "\n";

  std::ofstream cs(csv_path);
  cs << "session,acc\n";
  for (std::size_t i = 0; i < sessions.session_accuracy.size(); ++i) {
    cs << (i + 1) << ',' << format_double(sessions.session_accuracy[i]) << "\n";
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::optional<std::string>& resume_from) {
  {
    const auto errors = validate_config(cfg);
    if (!errors.empty()) {
      std::string joined = "invalid config:";
      for (const auto& e : errors) joined += "\n  " + e;
      throw InvalidParameterError(joined);
    }
  }
  fs::create_directories(cfg.output_dir);

  Dataset dataset = with_context(0, "load_dataset",
                                 [&] { return load_dataset(cfg.manifest); });
  standardize(dataset);

  BackboneConfig bc = cfg.backbone;
  if (bc.input_dim == 0) bc.input_dim = static_cast<int>(dataset.train_inputs.cols());
  bc.seed = cfg.seed;
  FrozenBackbone backbone =
      cfg.backbone_weights.empty()
          ? FrozenBackbone(bc)
          : FrozenBackbone::load(cfg.backbone_weights);
  if (backbone.config().input_dim !=
      static_cast<int>(dataset.train_inputs.cols())) {
    throw ShapeError("backbone input dim does not match dataset width");
  }

  const int tasks = cfg.method == Method::joint ? 1 : cfg.tasks;
  TaskSpec spec = with_context(0, "split_tasks", [&] {
    return split_tasks(dataset.num_classes, tasks, cfg.order, cfg.seed);
  });

  ExperimentResult result;
  const std::string json_path =
      (fs::path(cfg.output_dir) / "report.json").string();
  const std::string csv_path =
      (fs::path(cfg.output_dir) / "sessions.csv").string();
  result.report_json = json_path;

  if (cfg.method != Method::bicrcl) {
    BaselineConfig base;
    base.train = cfg.train;
    base.train.seed = splitmix64(cfg.seed);
    base.bottleneck_dim = cfg.bottleneck_dim;
    if (cfg.method == Method::finetune) {
      result.sessions = run_baseline_finetune(dataset, spec, backbone, base);
      write_report(cfg, result.sessions, true, 0.0, false, spec, json_path,
                   csv_path);
    } else {
      const double acc = run_baseline_joint(dataset, backbone, base);
      result.sessions.session_accuracy = {acc};
      result.sessions.acc_avg = acc;
      result.sessions.acc_last = acc;
      write_report(cfg, result.sessions, false, 0.0, false, spec, json_path,
                   csv_path);
    }
    return result;
  }

  const int embed_dim = bc.embed_dim;
  const int expansion =
      cfg.expansion_dim > 0 ? cfg.expansion_dim : 4 * embed_dim;
  const ProjectionHead head =
      make_projection_head(embed_dim, expansion, splitmix64(cfg.seed + 1));

  RunState st;
  st.master_rng.seed(splitmix64(cfg.seed));
  int start_session = 1;
  if (resume_from) {
    Checkpoint ck = load_checkpoint(*resume_from);
    st.conservative = ck.conservative;
    st.has_radical = ck.has_radical;
    st.radical = ck.radical;
    st.stats_c = ck.stats_conservative;
    st.stats_r = ck.stats_radical;
    st.beta = ck.beta;
    st.beta_fallback = ck.beta_fallback;
    st.classes_seen = ck.classes_seen;
    st.accs = ck.session_accuracy;
    restore_rng(st.master_rng, ck.rng_state);
    st.clf_c = fit(st.stats_c, st.beta);
    st.clf_r = st.has_radical ? fit(st.stats_r, st.beta) : st.clf_c;
    start_session = ck.session + 1;
  }

  for (int t = start_session; t <= spec.task_count; ++t) {
    TaskData task = with_context(t, "task_train_split",
                                 [&] { return task_train_split(dataset, spec, t); });
    if (task.size() == 0) {
      throw EmptyInputError("session " + std::to_string(t) + ": empty task");
    }
    const int new_total =
        st.classes_seen + static_cast<int>(spec.classes[t - 1].size());
    TrainConfig session_train = cfg.train;
    session_train.seed = st.master_rng();

    if (t == 1) {
      st.conservative = with_context(t, "train_session_one", [&] {
        return train_session_one(backbone, task, session_train,
                                 cfg.bottleneck_dim);
      });
      Mat emb = embed_parallel(backbone, st.conservative.adapters, task.inputs);
      Mat h = project(emb, head);
      if (cfg.beta > 0.0) {
        st.beta = cfg.beta;
      } else {
        BetaSelection sel = with_context(t, "select_beta", [&] {
          return select_beta(h, task.labels, default_beta_grid(),
                             st.master_rng());
        });
        st.beta = sel.beta;
        st.beta_fallback = sel.used_fallback;
        if (sel.used_fallback) {
          std::ofstream warn(fs::path(cfg.output_dir) / "warnings.txt",
                             std::ios::app);
          warn << "session 1: fewer than 5 samples in some class; "
                  "falling back to beta = 1\n";
        }
      }
      st.stats_c = SuffStats::zeros(expansion, new_total);
      accumulate(st.stats_c, h, task.labels);
      // The radical learner does not exist yet; seed its statistics with the
      // session-1 features so later sessions cover all classes.
      st.stats_r = st.stats_c;
      st.clf_c = fit(st.stats_c, st.beta);
      st.clf_r = st.clf_c;
    } else {
      st.radical.role = Role::radical;
      st.radical.adapters = with_context(t, "forward_transfer", [&] {
        return forward_transfer(st.conservative);
      });
      st.radical.classifier = st.conservative.classifier;
      st.has_radical = true;

      // Expand W_R and imprint the new classes before the first gradient step.
      Mat emb_new =
          embed_parallel(backbone, st.radical.adapters, task.inputs);
      imprint_columns(st.radical.classifier, group_new_classes(emb_new, task.labels));
      with_context(t, "train_radical", [&] {
        train_radical(st.radical, st.conservative, backbone, task,
                      session_train, new_total);
        return 0;
      });

      st.conservative.adapters = with_context(t, "consolidate_ema", [&] {
        return consolidate_ema(st.conservative.adapters, st.radical.adapters,
                               cfg.consolidation);
      });
      // New-class columns of W_C are imprinted from post-consolidation
      // conservative embeddings; old columns stay as they are.
      Mat emb_c = embed_parallel(backbone, st.conservative.adapters, task.inputs);
      imprint_columns(st.conservative.classifier,
                      group_new_classes(emb_c, task.labels));

      with_context(t, "update_analytic", [&] {
        expand_classes(st.stats_c, st.clf_c, new_total);
        expand_classes(st.stats_r, st.clf_r, new_total);
        accumulate(st.stats_c, project(emb_c, head), task.labels);
        Mat emb_r = embed_parallel(backbone, st.radical.adapters, task.inputs);
        accumulate(st.stats_r, project(emb_r, head), task.labels);
        st.clf_c = fit(st.stats_c, st.beta);
        st.clf_r = fit(st.stats_r, st.beta);
        return 0;
      });
    }
    st.classes_seen = new_total;

    // Collaborative inference over the cumulative test set.
    TaskData test = with_context(t, "cumulative_test_split", [&] {
      return cumulative_test_split(dataset, spec, t);
    });
    double acc = 0.0;
    with_context(t, "evaluate", [&] {
      Mat z_c = logits(
          project(embed_parallel(backbone, st.conservative.adapters,
                                 test.inputs), head),
          st.clf_c);
      std::vector<int> preds;
      if (!st.has_radical) {
        preds = argmax_rows(z_c);
      } else {
        Mat z_r = logits(
            project(embed_parallel(backbone, st.radical.adapters, test.inputs),
                    head),
            st.clf_r);
        std::vector<FusedPrediction> fused = fuse_batch(z_c, z_r, cfg.fusion);
        preds.reserve(fused.size());
        for (const auto& p : fused) preds.push_back(p.y_star);
        if (cfg.emit_predictions) {
          emit_prediction_csv((fs::path(cfg.output_dir) /
                               ("predictions_session_" + std::to_string(t) +
                                ".csv"))
                                  .string(),
                              fused, z_c, z_r, cfg.fusion.tau);
        }
      }
      long correct = 0;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == test.labels[i]) ++correct;
      }
      acc = 100.0 * static_cast<double>(correct) /
            static_cast<double>(test.size());
      return 0;
    });
    st.accs.push_back(acc);
    std::printf("session %d/%d: classes=%d acc=%.2f%%\n", t, spec.task_count,
                st.classes_seen, acc);
    std::fflush(stdout);

    Checkpoint ck;
    ck.session = t;
    ck.classes_seen = st.classes_seen;
    ck.conservative = st.conservative;
    ck.has_radical = st.has_radical;
    ck.radical = st.radical;
    ck.stats_conservative = st.stats_c;
    ck.stats_radical = st.stats_r;
    ck.beta = st.beta;
    ck.beta_fallback = st.beta_fallback;
    ck.rng_state = serialize_rng(st.master_rng);
    ck.session_accuracy = st.accs;
    save_checkpoint((fs::path(cfg.output_dir) /
                     ("checkpoint_" + std::to_string(t) + ".ck"))
                        .string(),
                    ck);
  }

  result.sessions.session_accuracy = st.accs;
  std::tie(result.sessions.acc_avg, result.sessions.acc_last) = metrics(st.accs);
  result.beta = st.beta;
  result.beta_fallback = st.beta_fallback;
  write_report(cfg, result.sessions, true, st.beta, st.beta_fallback, spec,
               json_path, csv_path);
  return result;
}

}  // namespace crcl
