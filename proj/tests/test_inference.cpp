#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "crcl/errors.hpp"
#include "crcl/inference.hpp"

using namespace crcl;

TEST_CASE("divergence threshold: hand arithmetic") {
  // Values {0, 2}: mean 1, population std 1, lambda 0.5 -> 1.5.
  const double d[] = {0.0, 2.0};
  CHECK(divergence_threshold(d, 0.5) == doctest::Approx(1.5).epsilon(1e-15));

  const double single[] = {3.0};
  CHECK(divergence_threshold(single, 0.5) == doctest::Approx(3.0));

  CHECK_THROWS_AS(divergence_threshold({}, 0.5), EmptyInputError);
}

TEST_CASE("divergence threshold matches a two-pass oracle") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  std::vector<double> d(100);
  for (auto& v : d) v = u(rng);
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= static_cast<double>(d.size());
  double var = 0.0;
  for (double v : d) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d.size());
  const double expected = mean + 0.5 * std::sqrt(var);
  CHECK(divergence_threshold(d, 0.5) == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("running divergence statistics agree with the batch threshold") {
  FusionConfig cfg;
  std::vector<double> d = {0.3, 1.2, 0.8, 2.5, 0.1, 1.9};
  for (double v : d) cfg.observe_divergence(v);
  CHECK(cfg.running_threshold() ==
        doctest::Approx(divergence_threshold(d, cfg.lambda)).epsilon(1e-12));
}

TEST_CASE("agreement passes through the confident learner's logits bitwise") {
  FusionConfig cfg;
  Vec zc(3), zr(3);
  zc << 5.0, 1.0, 0.0;     // very confident
  zr << 0.6, 0.5, 0.4;     // lukewarm, same argmax
  FusedPrediction p = fuse(zc, zr, cfg, 1e9);
  CHECK_FALSE(p.gate);
  CHECK(p.y_star == 0);
  for (int i = 0; i < 3; ++i) CHECK(p.z_fused(i) == zc(i));  // bitwise

  // Radical more confident: its logits pass through.
  FusedPrediction q = fuse(zr, zc, cfg, 1e9);
  for (int i = 0; i < 3; ++i) CHECK(q.z_fused(i) == zc(i));
}

TEST_CASE("agreement confidence ties go to the conservative learner") {
  FusionConfig cfg;
  Vec zc(2), zr(2);
  zc << 1.0, 0.0;
  zr << 0.0, 1.0;  // mirrored: identical max probability
  FusedPrediction p = fuse(zc, zr, cfg, 1e9);
  CHECK_FALSE(p.gate);
  CHECK(p.z_fused(0) == zc(0));
  CHECK(p.z_fused(1) == zc(1));
  CHECK(p.y_star == 0);
}

TEST_CASE("disagreement with symmetric confidence averages the logits") {
  FusionConfig cfg;
  Vec zc(2), zr(2);
  zc << 2.0, 0.0;
  zr << 0.0, 2.0;
  FusedPrediction p = fuse(zc, zr, cfg, 0.0);  // threshold 0 forces the gate
  CHECK(p.gate);
  CHECK(p.alpha_conservative == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(p.alpha_radical == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(p.z_fused(0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(p.z_fused(1) == doctest::Approx(1.0).epsilon(1e-15));
  // Fused logits tie; lowest index wins.
  CHECK(p.y_star == 0);
}

TEST_CASE("hand-evaluated divergence for mirrored sharp logits") {
  // tau = 0.1 turns [2,0] into probabilities (sigmoid of 20).
  FusionConfig cfg;
  Vec zc(2), zr(2);
  zc << 2.0, 0.0;
  zr << 0.0, 2.0;
  const double p1 = 1.0 / (1.0 + std::exp(-20.0));
  const double p0 = 1.0 / (1.0 + std::exp(20.0));
  const double expected =
      0.5 * ((p1 * std::log(p1 / p0) + p0 * std::log(p0 / p1)) +
             (p0 * std::log(p0 / p1) + p1 * std::log(p1 / p0)));
  FusedPrediction p = fuse(zc, zr, cfg, 0.0);
  CHECK(p.d_sym == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("fusion weights always form a convex combination") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> dist;
  FusionConfig cfg;
  for (int trial = 0; trial < 200; ++trial) {
    Vec zc(4), zr(4);
    for (int i = 0; i < 4; ++i) {
      zc(i) = dist(rng);
      zr(i) = dist(rng);
    }
    FusedPrediction p = fuse(zc, zr, cfg, 0.0);
    CHECK(p.alpha_conservative >= 0.0);
    CHECK(p.alpha_radical >= 0.0);
    CHECK(p.alpha_conservative + p.alpha_radical ==
          doctest::Approx(1.0).epsilon(1e-12));
    Vec expected = p.alpha_conservative * zc + p.alpha_radical * zr;
    CHECK((p.z_fused - expected).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::Index best;
    p.z_fused.maxCoeff(&best);
    CHECK(p.y_star == static_cast<int>(best));
  }
}

TEST_CASE("fuse validates shapes") {
  FusionConfig cfg;
  Vec a(2), b(3);
  a << 1, 2;
  b << 1, 2, 3;
  CHECK_THROWS_AS(fuse(a, b, cfg, 1.0), ShapeError);
}

TEST_CASE("batch fusion computes one shared threshold") {
  // Two identical pairs plus one wildly divergent pair. With a per-batch
  // threshold the divergent pair must gate on and the identical pairs off.
  FusionConfig cfg;
  Mat zc(3, 2), zr(3, 2);
  zc << 1.0, 0.0, 1.0, 0.0, 3.0, 0.0;
  zr << 1.0, 0.0, 1.0, 0.0, 0.0, 3.0;
  auto preds = fuse_batch(zc, zr, cfg);
  REQUIRE(preds.size() == 3);
  CHECK_FALSE(preds[0].gate);
  CHECK_FALSE(preds[1].gate);
  CHECK(preds[2].gate);
  CHECK(preds[0].d_sym == 0.0);

  const double d[] = {preds[0].d_sym, preds[1].d_sym, preds[2].d_sym};
  const double theta = divergence_threshold(d, cfg.lambda);
  CHECK(preds[2].d_sym > theta);
}

TEST_CASE("batch fusion equals per-sample fusion at the same threshold") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> dist;
  Mat zc(20, 5), zr(20, 5);
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 5; ++j) {
      zc(i, j) = dist(rng);
      zr(i, j) = dist(rng);
    }
  FusionConfig cfg;
  auto batch = fuse_batch(zc, zr, cfg);
  std::vector<double> d;
  for (const auto& p : batch) d.push_back(p.d_sym);
  const double theta = divergence_threshold(d, cfg.lambda);
  for (int i = 0; i < 20; ++i) {
    FusedPrediction one =
        fuse(zc.row(i).transpose(), zr.row(i).transpose(), cfg, theta);
    CHECK(one.y_star == batch[i].y_star);
    CHECK(one.gate == batch[i].gate);
    CHECK((one.z_fused - batch[i].z_fused).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("confidence is the max probability") {
  Vec pi(3);
  pi << 0.2, 0.7, 0.1;
  CHECK(confidence(pi) == 0.7);
}
