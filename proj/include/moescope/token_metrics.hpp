#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "moescope/trace.hpp"

namespace moescope {

enum class LogBase { natural, two };

/// Routing specialization: per-layer KL divergence between the layer's
/// selection frequencies and the uniform distribution, plus the mean.
struct SpecializationResult {
  double aggregate = 0.0;
  std::vector<double> per_layer;
};

/// KL(p_row || uniform) per layer; natural log by default, bits on request.
/// Zero probabilities contribute zero (0 log 0 = 0). Each value lies in
/// [0, log E] and the tiny negative values rounding can produce are clamped.
inline SpecializationResult routing_specialization(const RowProbabilities& rows,
                                                   LogBase base = LogBase::natural) {
  if (rows.num_layers < 1 || rows.num_experts < 1)
    throw TraceError("empty trace");
  const double E = static_cast<double>(rows.num_experts);
  const double scale = base == LogBase::natural ? 1.0 : 1.0 / std::log(2.0);
  SpecializationResult out;
  out.per_layer.reserve(static_cast<std::size_t>(rows.num_layers));
  for (int l = 0; l < rows.num_layers; ++l) {
    double kl = 0.0;
    for (int e = 0; e < rows.num_experts; ++e) {
      const double p = rows.at(l, e);
      if (p > 0.0) kl += p * std::log(p * E);
    }
    kl = std::max(0.0, kl * scale);
    out.per_layer.push_back(kl);
    out.aggregate += kl;
  }
  out.aggregate /= static_cast<double>(rows.num_layers);
  return out;
}

/// Effective rank of the row-probability matrix, normalized to (0, 1]:
/// the singular-value participation ratio (sum sigma)^2 / (sum sigma^2)
/// divided by min(L, E). No centering is applied.
inline double effective_rank(const RowProbabilities& rows) {
  if (rows.num_layers < 1 || rows.num_experts < 1)
    throw TraceError("empty trace");
  Eigen::MatrixXd m(rows.num_layers, rows.num_experts);
  for (int l = 0; l < rows.num_layers; ++l)
    for (int e = 0; e < rows.num_experts; ++e) m(l, e) = rows.at(l, e);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  if (svd.info() != Eigen::Success) throw TraceError("spectrum failure");
  const auto& sigma = svd.singularValues();
  double sum = 0.0;
  double sum_sq = 0.0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    sum += sigma[i];
    sum_sq += sigma[i] * sigma[i];
  }
  if (!(sum_sq > 0.0)) throw TraceError("spectrum failure");
  const double participation = (sum * sum) / sum_sq;
  return participation / static_cast<double>(std::min(rows.num_layers,
                                                      rows.num_experts));
}

/// Pairwise domain similarity and per-domain isolation scores.
/// Labels are sorted; `similarity` is row-major N x N with unit diagonal,
/// `isolation[i]` = 1 - mean similarity between domain i and the others.
struct IsolationResult {
  std::vector<std::string> labels;
  std::vector<double> isolation;
  std::vector<double> similarity;

  double sim(std::size_t a, std::size_t b) const {
    return similarity[a * labels.size() + b];
  }
};

namespace detail {

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw TraceError("cosine undefined");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline IsolationResult isolation_from_vectors(
    const std::vector<std::string>& labels,
    const std::vector<std::vector<double>>& vectors) {
  const std::size_t n = labels.size();
  if (n < 2) throw TraceError("need multiple domains");
  IsolationResult out;
  out.labels = labels;
  out.similarity.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      const double s = detail::cosine(vectors[i], vectors[j]);
      out.similarity[i * n + j] = s;
      out.similarity[j * n + i] = s;
    }
  out.isolation.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) total += out.similarity[i * n + j];
    out.isolation[i] = 1.0 - total / static_cast<double>(n - 1);
  }
  return out;
}

}  // namespace detail

/// Domain isolation over whole routing profiles: each domain's L x E
/// row-probability matrix is flattened to one vector; similarity is cosine,
/// isolation is one minus the mean similarity to every other domain.
/// Domains must share the same shape.
inline IsolationResult domain_isolation(
    const std::map<std::string, RowProbabilities>& domains) {
  if (domains.size() < 2) throw TraceError("need multiple domains");
  std::vector<std::string> labels;
  std::vector<std::vector<double>> vectors;
  int L = -1;
  int E = -1;
  for (const auto& [label, rows] : domains) {
    if (L < 0) {
      L = rows.num_layers;
      E = rows.num_experts;
    } else if (rows.num_layers != L || rows.num_experts != E) {
      throw TraceError("domain shape mismatch");
    }
    labels.push_back(label);
    vectors.push_back(rows.values);
  }
  return detail::isolation_from_vectors(labels, vectors);
}

/// Same comparison restricted to a single layer's probability rows.
inline IsolationResult per_layer_similarity(
    const std::map<std::string, RowProbabilities>& domains, int layer) {
  if (domains.size() < 2) throw TraceError("need multiple domains");
  std::vector<std::string> labels;
  std::vector<std::vector<double>> vectors;
  for (const auto& [label, rows] : domains) {
    if (layer < 0 || layer >= rows.num_layers)
      throw TraceError("layer index out of range");
    labels.push_back(label);
    std::vector<double> row(static_cast<std::size_t>(rows.num_experts));
    for (int e = 0; e < rows.num_experts; ++e)
      row[static_cast<std::size_t>(e)] = rows.at(layer, e);
    vectors.push_back(std::move(row));
  }
  return detail::isolation_from_vectors(labels, vectors);
}

}  // namespace moescope
