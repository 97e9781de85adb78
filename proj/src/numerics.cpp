#include "crcl/numerics.hpp"

#include <cmath>
#include <string>

#include "crcl/errors.hpp"

namespace crcl {

bool all_finite(const Mat& m) { return m.allFinite(); }

Mat solve_ridge(const Mat& gram, const Mat& cross, double beta) {
  if (gram.rows() != gram.cols()) {
    throw ShapeError("solve_ridge: G must be square, got " +
                     std::to_string(gram.rows()) + "x" +
                     std::to_string(gram.cols()));
  }
  if (cross.rows() != gram.rows()) {
    throw ShapeError("solve_ridge: C row count " + std::to_string(cross.rows()) +
                     " does not match G dimension " + std::to_string(gram.rows()));
  }
  if (!gram.allFinite() || !cross.allFinite() || !std::isfinite(beta)) {
    throw InvalidInputError("solve_ridge: non-finite input");
  }
  if (beta < 0.0) {
    throw InvalidParameterError("solve_ridge: beta must be non-negative");
  }

  Mat a = gram;
  a.diagonal().array() += beta;

  Eigen::LDLT<Mat> ldlt(a);
  if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0.0).any()) {
    Eigen::Index pivot = 0;
    if (ldlt.info() == Eigen::Success) {
      ldlt.vectorD().minCoeff(&pivot);
    } else {
      pivot = a.rows() - 1;
    }
    throw SingularityError(
        "solve_ridge: factorization of G + beta*I failed at pivot " +
        std::to_string(static_cast<long>(pivot)) +
        " (beta=" + std::to_string(beta) + " insufficient)");
  }

  Mat w = ldlt.solve(cross);
  const double c_norm = cross.size() == 0 ? 0.0 : cross.cwiseAbs().maxCoeff();
  const double residual = (a * w - cross).cwiseAbs().maxCoeff();
  if (c_norm > 0.0 && residual >= 1e-8 * c_norm) {
    Eigen::Index pivot = 0;
    ldlt.vectorD().minCoeff(&pivot);
    throw SingularityError(
        "solve_ridge: residual " + std::to_string(residual) +
        " exceeds tolerance; smallest pivot at index " +
        std::to_string(static_cast<long>(pivot)));
  }
  return w;
}

Vec softmax_temp(const Vec& logits, double tau) {
  if (!(tau > 0.0)) {
    throw InvalidParameterError("softmax_temp: tau must be positive");
  }
  if (!logits.allFinite()) {
    throw InvalidInputError("softmax_temp: non-finite logits");
  }
  Vec scaled = logits / tau;
  scaled.array() -= scaled.maxCoeff();
  Vec p = scaled.array().exp();
  p /= p.sum();
  return p;
}

double sym_kl(const Vec& p, const Vec& q) {
  if (p.size() != q.size()) {
    throw ShapeError("sym_kl: length mismatch " + std::to_string(p.size()) +
                     " vs " + std::to_string(q.size()));
  }
  if (!p.allFinite() || !q.allFinite()) {
    throw InvalidInputError("sym_kl: non-finite input");
  }
  constexpr double kEps = 1e-12;
  Vec pc = p.array().max(kEps);
  Vec qc = q.array().max(kEps);
  pc /= pc.sum();
  qc /= qc.sum();
  const double kl_pq = (pc.array() * (pc.array() / qc.array()).log()).sum();
  const double kl_qp = (qc.array() * (qc.array() / pc.array()).log()).sum();
  // Rounding can leave a vanishingly small negative sum for near-identical
  // distributions; the divergence itself is nonnegative.
  return std::max(0.0, 0.5 * (kl_pq + kl_qp));
}

}  // namespace crcl
