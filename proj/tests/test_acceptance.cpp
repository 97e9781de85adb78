// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criteria 6-8 run on a generated 10-class 28x28 IDX dataset.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "crcl/analytic.hpp"
#include "crcl/backbone.hpp"
#include "crcl/experiment.hpp"
#include "crcl/inference.hpp"
#include "crcl/learners.hpp"
#include "crcl/stream.hpp"

using namespace crcl;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int criterion, const std::string& name, bool ok,
            const std::string& detail = "") {
  std::printf("[%s] criterion %d: %s%s%s\n", ok ? "PASS" : "FAIL", criterion,
              name.c_str(), detail.empty() ? "" : " - ", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

Mat random_mat(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = dist(rng);
  return m;
}

// ---------------------------------------------------------------- criterion 1

void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  const int d = 16, M = 64, classes = 6;
  std::mt19937_64 rng(100);
  ProjectionHead head = make_projection_head(d, M, 101);

  SuffStats recursive = SuffStats::zeros(M, classes);
  Mat h_all(600, M);
  std::vector<int> y_all;
  for (int session = 0; session < 3; ++session) {
    Mat e = random_mat(200, d, rng);
    Mat h = project(e, head);
    std::vector<int> y(200);
    for (int i = 0; i < 200; ++i) y[i] = (i + session) % classes;
    accumulate(recursive, h, y);
    h_all.middleRows(session * 200, 200) = h;
    y_all.insert(y_all.end(), y.begin(), y.end());
  }
  AnalyticClassifier rec_fit = fit(recursive, 0.7);

  SuffStats batch = SuffStats::zeros(M, classes);
  accumulate(batch, h_all, y_all);
  AnalyticClassifier batch_fit = fit(batch, 0.7);

  const double diff =
      (rec_fit.weights - batch_fit.weights).cwiseAbs().maxCoeff();
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  report(1, "analytic batch-equivalence", diff < 1e-8 && secs < 5.0,
         "max abs diff " + std::to_string(diff) + ", " +
             std::to_string(secs) + " s");
}

// ---------------------------------------------------------------- criterion 2

void criterion_2() {
  BackboneConfig cfg;
  cfg.input_dim = 24;
  cfg.hidden_dim = 32;
  cfg.embed_dim = 12;
  cfg.num_blocks = 3;
  cfg.seed = 7;
  FrozenBackbone bb(cfg);
  std::mt19937_64 rng(8);
  AdapterSet zero = make_adapters(cfg, 8, rng);
  zero.set_zero();
  AdapterSet none = make_adapters(cfg, 8, rng);
  none.set_zero();

  Mat x = random_mat(100, 24, rng);
  Mat with_zero = bb.embed(x, zero);
  Mat base = bb.embed(x, none);
  const double dev = (with_zero - base).cwiseAbs().maxCoeff();
  report(2, "zero-adapter identity", dev == 0.0,
         "deviation " + std::to_string(dev) + " over 100 inputs");
}

// ---------------------------------------------------------------- criterion 3

void criterion_3() {
  std::mt19937_64 meta_rng(55);
  bool ok = true;
  double worst = 0.0;
  const double h = 1e-5;

  for (int config_idx = 0; config_idx < 20 && ok; ++config_idx) {
    BackboneConfig cfg;
    cfg.input_dim = 3 + static_cast<int>(meta_rng() % 4);
    cfg.hidden_dim = 6 + static_cast<int>(meta_rng() % 6);
    cfg.embed_dim = 3 + static_cast<int>(meta_rng() % 4);
    cfg.num_blocks = 1 + static_cast<int>(meta_rng() % 3);
    cfg.seed = meta_rng();
    const int k_hat = 2 + static_cast<int>(meta_rng() % (cfg.hidden_dim - 2));
    const int classes = 2 + static_cast<int>(meta_rng() % 3);
    const int n = 4 + static_cast<int>(meta_rng() % 5);

    FrozenBackbone bb(cfg);
    std::mt19937_64 rng(meta_rng());
    AdapterSet ad = make_adapters(cfg, k_hat, rng);
    std::normal_distribution<double> perturb(0.0, 0.1);
    for (auto& b : ad.blocks) {
      for (Eigen::Index i = 0; i < b.w_up.size(); ++i)
        b.w_up.data()[i] = perturb(rng);
      for (Eigen::Index i = 0; i < b.w_down.size(); ++i)
        b.w_down.data()[i] += perturb(rng);
    }
    ad.version++;

    Mat x = random_mat(n, cfg.input_dim, rng);
    Mat w = random_mat(cfg.embed_dim, classes, rng);
    Mat w_wide = random_mat(cfg.embed_dim, classes, rng);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) y[i] = static_cast<int>(rng() % classes);
    Mat e_const = random_mat(n, cfg.embed_dim, rng);

    // Scenario A: L_cls through the adapters and the imprint-style head.
    // Scenario B: L_R with the conservative embeddings held constant.
    for (int scenario = 0; scenario < 2; ++scenario) {
      const Mat& head = scenario == 0 ? w : w_wide;
      auto loss_at = [&](const AdapterSet& a, const Mat& cls) {
        Mat e = bb.embed(x, a);
        if (scenario == 0) return loss_ce(cls, e, y).loss;
        return loss_radical(cls, e, e_const, y).loss;
      };

      ForwardTrace trace;
      Mat e = bb.embed(x, ad, &trace);
      Mat d_emb, d_cls;
      if (scenario == 0) {
        CeResult r = loss_ce(head, e, y);
        d_emb = r.d_embeddings;
        d_cls = r.d_classifier;
      } else {
        RadicalLossResult r = loss_radical(head, e, e_const, y);
        d_emb = r.d_embeddings_radical;
        d_cls = r.d_classifier;
      }
      AdapterSet grad = bb.backward_adapters(trace, ad, d_emb);

      auto check_param = [&](double* param, const double* analytic,
                             Eigen::Index count, bool is_adapter) {
        for (Eigen::Index i = 0; i < count; ++i) {
          const double g = analytic[i];
          if (std::abs(g) <= 1e-8) continue;
          const double orig = param[i];
          param[i] = orig + h;
          const double lp =
              is_adapter ? loss_at(ad, head) : loss_at(ad, head);
          param[i] = orig - h;
          const double lm = loss_at(ad, head);
          param[i] = orig;
          const double fd = (lp - lm) / (2 * h);
          const double rel = std::abs(fd - g) / std::abs(g);
          worst = std::max(worst, rel);
          if (rel >= 1e-4) ok = false;
        }
      };

      for (std::size_t b = 0; b < ad.blocks.size(); ++b) {
        check_param(ad.blocks[b].w_down.data(), grad.blocks[b].w_down.data(),
                    ad.blocks[b].w_down.size(), true);
        check_param(ad.blocks[b].w_up.data(), grad.blocks[b].w_up.data(),
                    ad.blocks[b].w_up.size(), true);
      }
      Mat cls_copy = head;
      for (Eigen::Index i = 0; i < cls_copy.size(); ++i) {
        const double g = d_cls.data()[i];
        if (std::abs(g) <= 1e-8) continue;
        const double orig = cls_copy.data()[i];
        cls_copy.data()[i] = orig + h;
        const double lp = loss_at(ad, cls_copy);
        cls_copy.data()[i] = orig - h;
        const double lm = loss_at(ad, cls_copy);
        cls_copy.data()[i] = orig;
        const double fd = (lp - lm) / (2 * h);
        const double rel = std::abs(fd - g) / std::abs(g);
        worst = std::max(worst, rel);
        if (rel >= 1e-4) ok = false;
      }
    }
  }
  report(3, "finite-difference gradient check", ok,
         "20 configs, worst relative error " + std::to_string(worst));
}

// ---------------------------------------------------------------- criterion 4

void criterion_4() {
  BackboneConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden_dim = 10;
  cfg.embed_dim = 4;
  cfg.num_blocks = 2;
  std::mt19937_64 rng(13);
  AdapterSet c = make_adapters(cfg, 4, rng);
  AdapterSet r = make_adapters(cfg, 4, rng);
  std::normal_distribution<double> dist;
  for (auto& b : c.blocks)
    for (Eigen::Index i = 0; i < b.w_up.size(); ++i) b.w_up.data()[i] = dist(rng);
  for (auto& b : r.blocks)
    for (Eigen::Index i = 0; i < b.w_up.size(); ++i) b.w_up.data()[i] = dist(rng);

  bool ok = true;
  ConsolidationConfig cc;
  cc.alpha = 1.0;
  AdapterSet keep = consolidate_ema(c, r, cc);
  cc.alpha = 0.0;
  AdapterSet take = consolidate_ema(c, r, cc);
  for (std::size_t b = 0; b < c.blocks.size(); ++b) {
    ok &= (keep.blocks[b].w_up - c.blocks[b].w_up).cwiseAbs().maxCoeff() == 0.0;
    ok &= (keep.blocks[b].w_down - c.blocks[b].w_down).cwiseAbs().maxCoeff() ==
          0.0;
    ok &= (take.blocks[b].w_up - r.blocks[b].w_up).cwiseAbs().maxCoeff() == 0.0;
    ok &= (take.blocks[b].w_down - r.blocks[b].w_down).cwiseAbs().maxCoeff() ==
          0.0;
  }

  AdapterSet sc = c, sr = r;
  sc.blocks[0].w_up.setConstant(1.0);
  sr.blocks[0].w_up.setConstant(0.0);
  cc.alpha = 0.99;
  AdapterSet scalar = consolidate_ema(sc, sr, cc);
  ok &= scalar.blocks[0].w_up(0, 0) == 0.99;  // 0.99*1 + (1-0.99)*0

  for (double alpha : {0.25, 0.5, 0.99}) {
    cc.alpha = alpha;
    AdapterSet mix = consolidate_ema(c, r, cc);
    for (std::size_t b = 0; b < c.blocks.size(); ++b) {
      const Mat lo = c.blocks[b].w_up.cwiseMin(r.blocks[b].w_up);
      const Mat hi = c.blocks[b].w_up.cwiseMax(r.blocks[b].w_up);
      ok &= ((mix.blocks[b].w_up - lo).array() >= 0.0).all();
      ok &= ((hi - mix.blocks[b].w_up).array() >= 0.0).all();
    }
  }
  report(4, "EMA consolidation contract", ok);
}

// ---------------------------------------------------------------- criterion 5

void criterion_5() {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> dist;
  FusionConfig cfg;
  bool ok = true;
  for (int trial = 0; trial < 10000 && ok; ++trial) {
    const int dim = 2 + static_cast<int>(rng() % 6);
    Vec zc(dim), zr(dim);
    for (int i = 0; i < dim; ++i) {
      zc(i) = 3.0 * dist(rng);
      zr(i) = 3.0 * dist(rng);
    }

    // Agreement: one learner's logits bitwise.
    FusedPrediction agree = fuse(zc, zr, cfg, 1e12);
    bool is_c = true, is_r = true;
    for (int i = 0; i < dim; ++i) {
      is_c &= agree.z_fused(i) == zc(i);
      is_r &= agree.z_fused(i) == zr(i);
    }
    ok &= (is_c || is_r);

    // Disagreement: entrywise convex combination.
    FusedPrediction dis = fuse(zc, zr, cfg, -1.0);
    ok &= dis.gate;
    ok &= dis.alpha_conservative >= 0.0 && dis.alpha_radical >= 0.0;
    ok &= std::abs(dis.alpha_conservative + dis.alpha_radical - 1.0) < 1e-12;
    for (int i = 0; i < dim; ++i) {
      const double lo = std::min(zc(i), zr(i)) - 1e-12;
      const double hi = std::max(zc(i), zr(i)) + 1e-12;
      ok &= dis.z_fused(i) >= lo && dis.z_fused(i) <= hi;
    }

    // Shift invariance of the fused argmax.
    const double shift = 5.0 * dist(rng);
    Vec zcs = zc.array() + shift;
    Vec zrs = zr.array() + shift;
    FusedPrediction shifted = fuse(zcs, zrs, cfg, -1.0);
    ok &= shifted.y_star == dis.y_star;

    // Divergence nonnegativity, zero iff equal distributions.
    ok &= dis.d_sym >= 0.0;
    FusedPrediction same = fuse(zc, zc, cfg, -1.0);
    ok &= same.d_sym == 0.0;
    if (dis.d_sym == 0.0) {
      Vec pc = softmax_temp(zc, cfg.tau), pr = softmax_temp(zr, cfg.tau);
      ok &= (pc - pr).cwiseAbs().maxCoeff() < 1e-9;
    }
  }
  report(5, "fusion contract over 10^4 random pairs", ok);
}

// -------------------------------------------------------- criteria 6, 7, 8, 9

void write_be32(std::ofstream& os, std::uint32_t v) {
  const unsigned char b[4] = {
      static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
      static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

// 10 classes of 28x28 ubyte images: a fixed random template per class plus
// pixel noise. Visually meaningless but has the statistics the benchmark
// needs: within-class similarity and between-class separation.
void generate_benchmark(const fs::path& dir, int train_per_class,
                        int test_per_class) {
  std::mt19937_64 rng(424242);
  std::uniform_int_distribution<int> pixel(0, 255);
  std::normal_distribution<double> noise(0.0, 24.0);
  std::vector<std::vector<int>> templates(10, std::vector<int>(784));
  for (auto& t : templates)
    for (auto& p : t) p = pixel(rng);

  auto emit = [&](const fs::path& images, const fs::path& labels,
                  int per_class) {
    std::ofstream xi(images, std::ios::binary);
    std::ofstream yi(labels, std::ios::binary);
    const unsigned char xmagic[4] = {0, 0, 0x08, 3};
    const unsigned char ymagic[4] = {0, 0, 0x08, 1};
    xi.write(reinterpret_cast<const char*>(xmagic), 4);
    write_be32(xi, static_cast<std::uint32_t>(10 * per_class));
    write_be32(xi, 28);
    write_be32(xi, 28);
    yi.write(reinterpret_cast<const char*>(ymagic), 4);
    write_be32(yi, static_cast<std::uint32_t>(10 * per_class));
    for (int c = 0; c < 10; ++c) {
      for (int s = 0; s < per_class; ++s) {
        for (int p = 0; p < 784; ++p) {
          const double v = templates[c][p] + noise(rng);
          xi.put(static_cast<char>(
              static_cast<unsigned char>(std::clamp(v, 0.0, 255.0))));
        }
        yi.put(static_cast<char>(c));
      }
    }
  };
  emit(dir / "train-images.idx", dir / "train-labels.idx", train_per_class);
  emit(dir / "test-images.idx", dir / "test-labels.idx", test_per_class);
  std::ofstream man(dir / "manifest.txt");
  man << "format = idx\ntrain_images = train-images.idx\n"
      << "train_labels = train-labels.idx\ntest_images = test-images.idx\n"
      << "test_labels = test-labels.idx\n";
}

ExperimentConfig benchmark_config(const fs::path& dir, const fs::path& out,
                                  int tasks) {
  ExperimentConfig cfg;
  cfg.manifest = (dir / "manifest.txt").string();
  cfg.tasks = tasks;
  cfg.seed = 2024;
  cfg.output_dir = out.string();
  cfg.backbone.hidden_dim = 64;
  cfg.backbone.embed_dim = 32;
  cfg.backbone.num_blocks = 2;
  cfg.bottleneck_dim = 16;
  cfg.train.epochs_first = 8;
  cfg.train.epochs_later = 6;
  cfg.expansion_dim = 128;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void criteria_6_to_9() {
  const auto t0 = std::chrono::steady_clock::now();
  fs::path dir = fs::temp_directory_path() /
                 ("crcl_accept_" + std::to_string(std::random_device{}()));
  fs::create_directories(dir);
  generate_benchmark(dir, 120, 40);

  ExperimentConfig bi = benchmark_config(dir, dir / "out_bi", 5);
  ExperimentResult bi_res = run_experiment(bi);
  const std::string report_first = slurp(bi_res.report_json);

  ExperimentConfig ft = benchmark_config(dir, dir / "out_ft", 5);
  ft.method = Method::finetune;
  ExperimentResult ft_res = run_experiment(ft);

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  const bool c6 = ft_res.sessions.acc_last <= 40.0 &&
                  bi_res.sessions.acc_last >= 75.0 &&
                  bi_res.sessions.acc_avg >= 85.0 && secs < 900.0;
  char detail[160];
  std::snprintf(detail, sizeof detail,
                "finetune Acc_Last %.2f, bicrcl Acc_Last %.2f / Acc_Avg %.2f, "
                "%.0f s",
                ft_res.sessions.acc_last, bi_res.sessions.acc_last,
                bi_res.sessions.acc_avg, secs);
  report(6, "forgetting benchmark", c6, detail);

  ExperimentConfig rev = benchmark_config(dir, dir / "out_rev", 5);
  rev.order = TaskOrder::reversed;
  ExperimentResult rev_res = run_experiment(rev);
  const double order_gap =
      std::abs(bi_res.sessions.acc_last - rev_res.sessions.acc_last);
  report(7, "task-order robustness", order_gap <= 5.0,
         "gap " + std::to_string(order_gap) + " pp");

  ExperimentConfig t10 = benchmark_config(dir, dir / "out_t10", 10);
  ExperimentResult t10_res = run_experiment(t10);
  const double count_drop =
      bi_res.sessions.acc_last - t10_res.sessions.acc_last;
  report(8, "task-count robustness", count_drop <= 10.0,
         "T=10 drop " + std::to_string(count_drop) + " pp");

  ExperimentResult again = run_experiment(bi);
  report(9, "byte-identical reports", slurp(again.report_json) == report_first);

  fs::remove_all(dir);
}

}  // namespace

int main() {
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criteria_6_to_9();
  if (failures == 0) {
    std::printf("all acceptance criteria passed\n");
    return 0;
  }
  std::printf("%d acceptance criteria failed\n", failures);
  return 1;
}
