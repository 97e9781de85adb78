#pragma once

#include <Eigen/Dense>

namespace crcl {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

bool all_finite(const Mat& m);

/// Solves (G + beta*I) W = C for a symmetric PSD G via Cholesky.
/// Throws SingularityError (naming the offending pivot) if the factorization
/// fails or the residual exceeds 1e-8 * ||C||_inf.
Mat solve_ridge(const Mat& gram, const Mat& cross, double beta);

/// Max-stabilized softmax of z / tau. tau must be positive.
Vec softmax_temp(const Vec& logits, double tau);

/// 0.5 * (KL(p||q) + KL(q||p)). Entries are clamped to >= 1e-12 and
/// renormalized before taking logs, so degenerate inputs stay finite.
double sym_kl(const Vec& p, const Vec& q);

}  // namespace crcl
