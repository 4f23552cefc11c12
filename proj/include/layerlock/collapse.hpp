#pragma once

// Representation-collapse diagnostics over a batch of per-clip feature maps.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "layerlock/tensor.hpp"

namespace layerlock {

struct CollapseMetrics {
  double token_variance = 0.0;  // mean over channels of the variance across all tokens
  double batch_variance = 0.0;  // mean over channels of the variance of per-clip means
  double effective_rank = 0.0;  // exp(entropy of normalised singular values)
};

/// Effective rank of a matrix: exp(-sum p log p) with p the singular values
/// divided by their sum. The zero matrix has effective rank 0.
inline double effective_rank(const Eigen::MatrixXd& m) {
  const Eigen::VectorXd s = m.jacobiSvd().singularValues();
  const double total = s.sum();
  if (!(total > 0.0)) return 0.0;
  double h = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const double p = s[i] / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::exp(h);
}

/// Metrics over B clips, each an N x D feature map. Variances are population
/// variances; the rank is taken over the uncentred (B*N) x D matrix.
inline CollapseMetrics collapse_metrics(std::span<const Tensor> features) {
  if (features.size() < 2) throw ContractError("collapse_metrics needs at least two clips");
  const std::size_t n = features[0].rows(), d = features[0].cols();
  for (const auto& f : features) {
    if (f.rows() != n || f.cols() != d) throw DimensionError("collapse_metrics: clips differ in shape");
  }
  const std::size_t b = features.size(), total = b * n;
  Eigen::MatrixXd all(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(d));
  Eigen::MatrixXd clip_means(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(d));
  for (std::size_t c = 0; c < b; ++c) {
    const auto v = features[c].data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) all(static_cast<Eigen::Index>(c * n + i), static_cast<Eigen::Index>(j)) = v[i * d + j];
    clip_means.row(static_cast<Eigen::Index>(c)) =
        all.middleRows(static_cast<Eigen::Index>(c * n), static_cast<Eigen::Index>(n)).colwise().mean();
  }
  auto mean_column_variance = [](const Eigen::MatrixXd& m) {
    const Eigen::RowVectorXd mu = m.colwise().mean();
    return (m.rowwise() - mu).array().square().colwise().sum().mean() / static_cast<double>(m.rows());
  };
  CollapseMetrics out;
  out.token_variance = mean_column_variance(all);
  out.batch_variance = mean_column_variance(clip_means);
  out.effective_rank = effective_rank(all);
  return out;
}

}  // namespace layerlock
