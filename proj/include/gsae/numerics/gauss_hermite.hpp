#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "gsae/errors.hpp"

namespace gsae {

/// Gauss-Hermite rule for the weight exp(-x^2). Weights are stored as logs
/// because the 51-node rule reaches weights below 1e-80.
struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> log_weights;
};

/// Golub-Welsch: nodes are eigenvalues of the symmetric Jacobi matrix with
/// off-diagonal sqrt(k/2); weights are sqrt(pi) times squared first
/// eigenvector components.
inline GaussHermiteRule gauss_hermite(int n) {
  if (n < 1) throw DomainError("gauss_hermite: need at least one node");
  GaussHermiteRule rule;
  if (n == 1) {
    rule.nodes = {0.0};
    rule.log_weights = {0.5 * std::log(std::numbers::pi)};
    return rule;
  }
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(0.5 * k);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  if (eig.info() != Eigen::Success) throw EvaluationError("gauss_hermite: eigen decomposition failed");
  rule.nodes.resize(n);
  rule.log_weights.resize(n);
  for (int k = 0; k < n; ++k) {
    rule.nodes[k] = eig.eigenvalues()(k);
    const double v0 = eig.eigenvectors()(0, k);
    rule.log_weights[k] = 0.5 * std::log(std::numbers::pi) + 2.0 * std::log(std::abs(v0));
  }
  return rule;
}

}  // namespace gsae
