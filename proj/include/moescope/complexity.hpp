#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "moescope/parallel.hpp"
#include "moescope/rng.hpp"
#include "moescope/trace.hpp"

namespace moescope {

/// Row-stochastic input to the sign-sum complexity estimator: `num_rows`
/// routing distributions over `num_experts` experts, row-major.
struct RssInput {
  int num_rows = 0;
  int num_experts = 0;
  std::vector<double> probs;
};

/// Statistics of the Rademacher sign sum
/// v = (1 / (m * E)) * sum_{i,e} sigma_ie * p_ie.
struct RssResult {
  double signed_mean = 0.0;
  double abs_mean = 0.0;
  double per_draw_std = 0.0;    // sample std over Monte Carlo draws,
                                // exact distribution std for rss_exact
  double analytic_std = 0.0;    // sqrt(sum p^2) / (m * E)
  std::int64_t iterations = 0;
  int num_rows = 0;
  int num_experts = 0;
  bool sparse = false;
};

namespace detail {

inline void check_rss_input(const RssInput& input) {
  if (input.num_rows < 1 || input.num_experts < 1)
    throw std::invalid_argument("empty sign-sum input");
  if (input.probs.size() != static_cast<std::size_t>(input.num_rows) *
                                static_cast<std::size_t>(input.num_experts))
    throw std::invalid_argument("bad sign-sum input shape");
  const std::size_t e = static_cast<std::size_t>(input.num_experts);
  for (int row = 0; row < input.num_rows; ++row) {
    double sum = 0.0;
    for (std::size_t j = 0; j < e; ++j) {
      const double p = input.probs[static_cast<std::size_t>(row) * e + j];
      if (!std::isfinite(p) || p < 0.0)
        throw std::invalid_argument("bad probability row");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw std::invalid_argument("bad probability row");
  }
}

inline double analytic_std(const RssInput& input) {
  double sum_sq = 0.0;
  for (double p : input.probs) sum_sq += p * p;
  const double cells = static_cast<double>(input.num_rows) *
                       static_cast<double>(input.num_experts);
  return std::sqrt(sum_sq) / cells;
}

}  // namespace detail

/**
 * Monte Carlo sign-sum statistics.
 *
 * Each iteration i derives an independent stream with
 * Rng::derive_stream(seed, i). Signs follow the probability cells in
 * row-major order (rows outer, experts inner), packed 64 to a generator
 * output: each block of 64 consecutive cells consumes one next() draw, and
 * cell j of the block takes bit (63 - j) of that draw, most significant
 * first, with a set bit meaning +1. This layout is part of the
 * reproducibility contract. Iterations run in parallel up to thread_cap();
 * the reduction happens afterwards in iteration order, so every statistic is
 * identical for any worker count. Reported are the signed mean, the mean
 * absolute value, the sample standard deviation over draws (denominator
 * N - 1), and the closed-form standard deviation sqrt(sum p^2) / (m * E).
 */
inline RssResult rss(const RssInput& input, std::int64_t iterations,
                     std::uint64_t seed) {
  detail::check_rss_input(input);
  if (iterations < 1) throw std::invalid_argument("iterations must be positive");
  const double cells = static_cast<double>(input.num_rows) *
                       static_cast<double>(input.num_experts);
  std::vector<double> draws(static_cast<std::size_t>(iterations));
  constexpr std::uint64_t kSignBit = 0x8000000000000000ULL;
  detail::parallel_iterations(iterations, [&](std::int64_t it) {
    Rng rng(Rng::derive_stream(seed, static_cast<std::uint64_t>(it)));
    double acc = 0.0;
    std::uint64_t bits = 0;
    int left = 0;
    for (const double p : input.probs) {
      if (left == 0) {
        bits = rng.next();
        left = 64;
      }
      // Branchless sign application: clear bit -> flip the double's sign.
      std::uint64_t cell;
      std::memcpy(&cell, &p, sizeof cell);
      cell ^= ~bits & kSignBit;
      double signed_p;
      std::memcpy(&signed_p, &cell, sizeof signed_p);
      acc += signed_p;
      bits <<= 1;
      --left;
    }
    draws[static_cast<std::size_t>(it)] = acc / cells;
  });
  double sum_v = 0.0;
  double sum_abs = 0.0;
  double sum_sq = 0.0;
  for (double v : draws) {
    sum_v += v;
    sum_abs += std::abs(v);
    sum_sq += v * v;
  }
  RssResult out;
  out.num_rows = input.num_rows;
  out.num_experts = input.num_experts;
  out.iterations = iterations;
  const double n = static_cast<double>(iterations);
  out.signed_mean = sum_v / n;
  out.abs_mean = sum_abs / n;
  out.per_draw_std =
      iterations > 1
          ? std::sqrt(std::max(0.0, (sum_sq - n * out.signed_mean *
                                                  out.signed_mean) /
                                        (n - 1.0)))
          : 0.0;
  out.analytic_std = detail::analytic_std(input);
  return out;
}

/// Exact sign-sum statistics by full enumeration of all 2^(m*E) sign
/// patterns. per_draw_std is the exact distribution standard deviation.
/// Limited to m * E <= 20.
inline RssResult rss_exact(const RssInput& input) {
  detail::check_rss_input(input);
  const int bits = input.num_rows * input.num_experts;
  if (bits > 20) throw std::invalid_argument("instance too large for enumeration");
  const std::uint64_t patterns = 1ULL << bits;
  const double cells = static_cast<double>(bits);
  double sum_v = 0.0;
  double sum_abs = 0.0;
  double sum_sq = 0.0;
  for (std::uint64_t pattern = 0; pattern < patterns; ++pattern) {
    double acc = 0.0;
    for (int cell = 0; cell < bits; ++cell) {
      const double p = input.probs[static_cast<std::size_t>(cell)];
      acc += (pattern >> cell) & 1u ? p : -p;
    }
    const double v = acc / cells;
    sum_v += v;
    sum_abs += std::abs(v);
    sum_sq += v * v;
  }
  RssResult out;
  out.num_rows = input.num_rows;
  out.num_experts = input.num_experts;
  out.iterations = static_cast<std::int64_t>(patterns);
  const double n = static_cast<double>(patterns);
  out.signed_mean = sum_v / n;
  out.abs_mean = sum_abs / n;
  out.per_draw_std = std::sqrt(
      std::max(0.0, sum_sq / n - out.signed_mean * out.signed_mean));
  out.analytic_std = detail::analytic_std(input);
  return out;
}

/**
 * Assembles the estimator input from a trace layer.
 *
 * Dense mode (default) takes each token's dense_probs at the layer and
 * errors when any token lacks them. Sparse mode scatters the renormalized
 * gate_probs onto the selected experts instead and marks the result as an
 * approximation. When the trace holds more than `max_tokens` tokens, a
 * uniform subsample is drawn without replacement from a dedicated stream
 * (derive_stream(seed, 2^63)) and kept in trace order.
 */
inline RssInput rss_input_from_trace(const RoutingTrace& trace, int layer,
                                     std::uint64_t seed, bool sparse_mode = false,
                                     std::int64_t max_tokens = 100000) {
  const int L = trace.header.num_layers;
  const int E = trace.header.num_experts;
  if (trace.tokens.empty()) throw TraceError("empty trace");
  if (layer < 0 || layer >= L) throw TraceError("layer index out of range");
  if (max_tokens < 1) throw std::invalid_argument("max_tokens must be positive");

  std::vector<std::size_t> selected;
  const std::int64_t total = static_cast<std::int64_t>(trace.tokens.size());
  if (total > max_tokens) {
    // Partial Fisher-Yates over token indices, then restored to trace order.
    Rng rng(Rng::derive_stream(seed, 1ULL << 63));
    std::vector<std::size_t> indices(static_cast<std::size_t>(total));
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    for (std::int64_t i = 0; i < max_tokens; ++i) {
      const std::uint64_t j =
          static_cast<std::uint64_t>(i) +
          rng.index(static_cast<std::uint64_t>(total - i));
      std::swap(indices[static_cast<std::size_t>(i)],
                indices[static_cast<std::size_t>(j)]);
    }
    selected.assign(indices.begin(), indices.begin() + max_tokens);
    std::sort(selected.begin(), selected.end());
  } else {
    selected.resize(static_cast<std::size_t>(total));
    for (std::size_t i = 0; i < selected.size(); ++i) selected[i] = i;
  }

  RssInput input;
  input.num_rows = static_cast<int>(selected.size());
  input.num_experts = E;
  input.probs.reserve(selected.size() * static_cast<std::size_t>(E));
  for (std::size_t idx : selected) {
    if (static_cast<int>(trace.tokens[idx].layers.size()) != L)
      throw TraceError("inconsistent record");
    const LayerRouting& lr = trace.tokens[idx].layers[static_cast<std::size_t>(layer)];
    if (sparse_mode) {
      if (!lr.gate_probs) throw TraceError("gate probabilities required");
      double total_gate = 0.0;
      for (double p : *lr.gate_probs) total_gate += p;
      if (!(total_gate > 0.0)) throw TraceError("gate probabilities required");
      std::vector<double> row(static_cast<std::size_t>(E), 0.0);
      for (std::size_t i = 0; i < lr.experts.size(); ++i)
        row[static_cast<std::size_t>(lr.experts[i])] =
            (*lr.gate_probs)[i] / total_gate;
      input.probs.insert(input.probs.end(), row.begin(), row.end());
    } else {
      if (!lr.dense_probs) throw TraceError("dense probabilities required");
      input.probs.insert(input.probs.end(), lr.dense_probs->begin(),
                         lr.dense_probs->end());
    }
  }
  return input;
}

/// Sign-sum statistics straight from a trace layer; see rss_input_from_trace.
inline RssResult rss_from_trace(const RoutingTrace& trace, int layer,
                                std::int64_t iterations, std::uint64_t seed,
                                bool sparse_mode = false,
                                std::int64_t max_tokens = 100000) {
  RssInput input =
      rss_input_from_trace(trace, layer, seed, sparse_mode, max_tokens);
  RssResult out = rss(input, iterations, seed);
  out.sparse = sparse_mode;
  return out;
}

}  // namespace moescope
