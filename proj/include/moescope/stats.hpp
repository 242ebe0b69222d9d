#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "moescope/sequence_metrics.hpp"
#include "moescope/trace.hpp"

namespace moescope {

/// Spearman rank correlation with average ranks for ties. Throws
/// "undefined correlation" for mismatched/short inputs or constant vectors.
inline double spearman(const std::vector<double>& a,
                       const std::vector<double>& b) {
  const std::size_t n = a.size();
  if (n != b.size() || n < 2) throw TraceError("undefined correlation");
  auto ranks = [](const std::vector<double>& v) {
    const std::size_t m = v.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> rank(m);
    std::size_t i = 0;
    while (i < m) {
      std::size_t j = i;
      while (j + 1 < m && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t t = i; t <= j; ++t) rank[order[t]] = avg;
      i = j + 1;
    }
    return rank;
  };
  for (double v : a)
    if (!std::isfinite(v)) throw TraceError("undefined correlation");
  for (double v : b)
    if (!std::isfinite(v)) throw TraceError("undefined correlation");
  const std::vector<double> ra = ranks(a);
  const std::vector<double> rb = ranks(b);
  double mean_a = 0.0;
  double mean_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_a += ra[i];
    mean_b += rb[i];
  }
  mean_a /= static_cast<double>(n);
  mean_b /= static_cast<double>(n);
  double cov = 0.0;
  double var_a = 0.0;
  double var_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = ra[i] - mean_a;
    const double db = rb[i] - mean_b;
    cov += da * db;
    var_a += da * da;
    var_b += db * db;
  }
  if (!(var_a > 0.0) || !(var_b > 0.0)) throw TraceError("undefined correlation");
  return cov / std::sqrt(var_a * var_b);
}

/// Coefficient of variation in percent: sample standard deviation
/// (denominator n - 1) divided by the mean, times 100.
inline double coefficient_of_variation(const std::vector<double>& values) {
  if (values.size() < 2) throw TraceError("undefined correlation");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  if (mean == 0.0) throw TraceError("zero mean");
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (static_cast<double>(values.size()) - 1.0));
  return sd / mean * 100.0;
}

/// A labeled trace participating in a sweep.
struct DomainTrace {
  std::string label;
  const RoutingTrace* trace = nullptr;
};

/// Robustness sweep output: `matrix` holds one metric value per
/// (configuration row, parameter value); `pairwise_spearman` correlates the
/// row vectors between parameter values (NaN where a column is constant).
struct SweepResult {
  std::vector<double> values;
  std::vector<std::string> rows;
  std::vector<double> matrix;              // rows.size() x values.size()
  std::vector<double> pairwise_spearman;   // values.size() x values.size()

  double at(std::size_t row, std::size_t col) const {
    return matrix[row * values.size() + col];
  }
  double rho(std::size_t a, std::size_t b) const {
    return pairwise_spearman[a * values.size() + b];
  }

  /// Mean of the defined off-diagonal Spearman entries.
  double mean_pairwise_spearman() const {
    const std::size_t v = values.size();
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t a = 0; a < v; ++a)
      for (std::size_t b = a + 1; b < v; ++b)
        if (std::isfinite(pairwise_spearman[a * v + b])) {
          total += pairwise_spearman[a * v + b];
          ++count;
        }
    if (count == 0) throw TraceError("undefined correlation");
    return total / static_cast<double>(count);
  }
};

namespace detail {

inline void finish_sweep(SweepResult& out) {
  const std::size_t v = out.values.size();
  const std::size_t r = out.rows.size();
  out.pairwise_spearman.assign(v * v,
                               std::numeric_limits<double>::quiet_NaN());
  for (std::size_t a = 0; a < v; ++a) {
    out.pairwise_spearman[a * v + a] = 1.0;
    for (std::size_t b = a + 1; b < v; ++b) {
      std::vector<double> col_a;
      std::vector<double> col_b;
      col_a.reserve(r);
      col_b.reserve(r);
      for (std::size_t row = 0; row < r; ++row) {
        const double x = out.matrix[row * v + a];
        const double y = out.matrix[row * v + b];
        if (std::isfinite(x) && std::isfinite(y)) {
          col_a.push_back(x);
          col_b.push_back(y);
        }
      }
      double rho = std::numeric_limits<double>::quiet_NaN();
      try {
        rho = spearman(col_a, col_b);
      } catch (const TraceError&) {
        // Column pair undefined (constant or too short); left as NaN.
      }
      out.pairwise_spearman[a * v + b] = rho;
      out.pairwise_spearman[b * v + a] = rho;
    }
  }
}

}  // namespace detail

/**
 * Window-length sweep: per domain and layer, NGR at each n (and G-NGR rows
 * when a group map is supplied). With several domains the per-layer rows of
 * every domain are stacked, which is the pooled population used for the
 * cross-length rank correlations.
 */
inline SweepResult sweep_n(const std::vector<DomainTrace>& domains,
                           const std::vector<int>& ns,
                           const GroupMap* groups = nullptr) {
  if (domains.empty()) throw std::invalid_argument("no traces");
  if (ns.empty()) throw std::invalid_argument("no parameter values");
  SweepResult out;
  for (int n : ns) out.values.push_back(static_cast<double>(n));
  for (const DomainTrace& d : domains) {
    if (!d.trace) throw std::invalid_argument("no traces");
    const int L = d.trace->header.num_layers;
    const auto profile = ngr_profile(*d.trace, ns);
    for (int l = 0; l < L; ++l) {
      out.rows.push_back(d.label + "/layer" + std::to_string(l) + "/ngr");
      for (const NgrResult& r : profile)
        out.matrix.push_back(r.per_layer[static_cast<std::size_t>(l)]);
    }
    if (groups) {
      const auto gprofile = gngr_profile(*d.trace, *groups, ns);
      for (int l = 0; l < L; ++l) {
        out.rows.push_back(d.label + "/layer" + std::to_string(l) + "/gngr");
        for (const NgrResult& r : gprofile)
          out.matrix.push_back(r.per_layer[static_cast<std::size_t>(l)]);
      }
    }
  }
  detail::finish_sweep(out);
  return out;
}

/**
 * Group-count sweep: for each requested g a grouping is inferred per domain
 * and the per-layer G-NGR at window length n becomes that column's entries.
 */
inline SweepResult sweep_groups(const std::vector<DomainTrace>& domains,
                                const std::vector<int>& gs, int n) {
  if (domains.empty()) throw std::invalid_argument("no traces");
  if (gs.empty()) throw std::invalid_argument("no parameter values");
  SweepResult out;
  for (int g : gs) out.values.push_back(static_cast<double>(g));
  for (const DomainTrace& d : domains) {
    if (!d.trace) throw std::invalid_argument("no traces");
    const int L = d.trace->header.num_layers;
    std::vector<std::vector<double>> columns;
    for (int g : gs) {
      const GroupMap map = infer_groups(*d.trace, g);
      const auto profile = gngr_profile(*d.trace, map, {n});
      columns.push_back(profile.front().per_layer);
    }
    for (int l = 0; l < L; ++l) {
      out.rows.push_back(d.label + "/layer" + std::to_string(l));
      for (const auto& col : columns)
        out.matrix.push_back(col[static_cast<std::size_t>(l)]);
    }
  }
  detail::finish_sweep(out);
  return out;
}

}  // namespace moescope
