#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "moescope/trace.hpp"

namespace moescope {

/// N-gram expertise at one window length: the fraction of sliding windows
/// (within samples, per layer) whose expert sets share at least one expert.
struct NgrResult {
  int n = 0;
  double aggregate = 0.0;
  std::vector<double> per_layer;
  std::int64_t window_count = 0;            // pooled over layers and samples
  std::int64_t consistent_count = 0;        // pooled over layers and samples
  std::vector<std::int64_t> layer_windows;
  std::vector<std::int64_t> layer_consistent;
};

namespace detail {

/// Sample boundaries as [begin, end) token index pairs.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_ranges(
    const RoutingTrace& trace) {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  std::size_t begin = 0;
  for (std::size_t i = 1; i <= trace.tokens.size(); ++i) {
    if (i == trace.tokens.size() ||
        trace.tokens[i].sample_id != trace.tokens[begin].sample_id) {
      ranges.emplace_back(begin, i);
      begin = i;
    }
  }
  return ranges;
}

/**
 * Shared window-consistency counter.
 *
 * For every token position the streak of each id (expert or group) is the
 * number of consecutive sets, ending here, that contain it. A window of
 * length n ending at this position is consistent exactly when some id has
 * streak >= n, so a histogram of per-position maximum streaks (clamped to
 * max_n) yields consistent-window counts for every n at once via suffix
 * sums. Streaks cannot exceed the position count inside a sample, so the
 * window-existence constraint is implied.
 *
 * `ids(token_index, layer)` must return the token's id set for the layer.
 * Returns per-layer histograms hist[l][r], r in [0, max_n].
 */
template <typename IdsFn>
std::vector<std::vector<std::int64_t>> streak_histograms(
    const RoutingTrace& trace, int universe, int max_n, IdsFn&& ids) {
  const int L = trace.header.num_layers;
  std::vector<std::vector<std::int64_t>> hist(
      static_cast<std::size_t>(L),
      std::vector<std::int64_t>(static_cast<std::size_t>(max_n) + 1, 0));
  const auto ranges = sample_ranges(trace);
  std::vector<std::int64_t> streak(static_cast<std::size_t>(universe), 0);
  std::vector<std::int64_t> seen(static_cast<std::size_t>(universe), -1);
  for (int l = 0; l < L; ++l) {
    auto& h = hist[static_cast<std::size_t>(l)];
    for (const auto& [begin, end] : ranges) {
      const std::int64_t stamp_base = static_cast<std::int64_t>(begin);
      for (std::size_t i = begin; i < end; ++i) {
        const std::vector<int>& cur = ids(i, l);
        std::int64_t best = 0;
        const std::int64_t pos = static_cast<std::int64_t>(i) - stamp_base;
        for (int id : cur) {
          if (id < 0 || id >= universe) throw TraceError("inconsistent record");
          auto idx = static_cast<std::size_t>(id);
          // `seen` holds the last position where this id appeared; the
          // streak continues only if that was the immediately previous one.
          std::int64_t s = (seen[idx] == pos - 1) ? streak[idx] + 1 : 1;
          streak[idx] = s;
          seen[idx] = pos;
          best = std::max(best, s);
        }
        ++h[static_cast<std::size_t>(
            std::min<std::int64_t>(best, max_n))];
      }
      // Reset marks for the next sample: positions restart at zero there,
      // and a cleared `seen` entry compares equal to pos - 1 = -1 at the
      // first position, so streaks must be zeroed alongside or they would
      // continue across the sample boundary.
      for (std::size_t e = 0; e < seen.size(); ++e) {
        seen[e] = -1;
        streak[e] = 0;
      }
    }
  }
  return hist;
}

inline std::vector<std::int64_t> window_counts_per_layer(
    const RoutingTrace& trace, int n) {
  std::int64_t windows = 0;
  for (const auto& [begin, end] : sample_ranges(trace)) {
    const std::int64_t len = static_cast<std::int64_t>(end - begin);
    if (len >= n) windows += len - n + 1;
  }
  return std::vector<std::int64_t>(
      static_cast<std::size_t>(trace.header.num_layers), windows);
}

inline NgrResult result_from_histograms(
    const RoutingTrace& trace,
    const std::vector<std::vector<std::int64_t>>& hist, int n, int max_n) {
  NgrResult out;
  out.n = n;
  const int L = trace.header.num_layers;
  out.layer_windows = window_counts_per_layer(trace, n);
  out.layer_consistent.assign(static_cast<std::size_t>(L), 0);
  for (int l = 0; l < L; ++l) {
    std::int64_t consistent = 0;
    for (int r = std::min(n, max_n); r <= max_n; ++r)
      consistent += hist[static_cast<std::size_t>(l)][static_cast<std::size_t>(r)];
    out.layer_consistent[static_cast<std::size_t>(l)] = consistent;
    out.window_count += out.layer_windows[static_cast<std::size_t>(l)];
    out.consistent_count += consistent;
  }
  out.per_layer.assign(static_cast<std::size_t>(L),
                       std::numeric_limits<double>::quiet_NaN());
  for (int l = 0; l < L; ++l) {
    const std::int64_t w = out.layer_windows[static_cast<std::size_t>(l)];
    if (w > 0)
      out.per_layer[static_cast<std::size_t>(l)] =
          static_cast<double>(out.layer_consistent[static_cast<std::size_t>(l)]) /
          static_cast<double>(w);
  }
  out.aggregate = out.window_count > 0
                      ? static_cast<double>(out.consistent_count) /
                            static_cast<double>(out.window_count)
                      : std::numeric_limits<double>::quiet_NaN();
  return out;
}

template <typename IdsFn>
std::vector<NgrResult> windows_profile(const RoutingTrace& trace, int universe,
                                       const std::vector<int>& ns, IdsFn&& ids) {
  if (trace.tokens.empty()) throw TraceError("empty trace");
  for (const TokenRecord& t : trace.tokens)
    if (static_cast<int>(t.layers.size()) != trace.header.num_layers)
      throw TraceError("inconsistent record");
  int max_n = 0;
  for (int n : ns) {
    if (n < 1) throw std::invalid_argument("n must be positive");
    max_n = std::max(max_n, n);
  }
  const auto hist = streak_histograms(trace, universe, max_n,
                                      std::forward<IdsFn>(ids));
  std::vector<NgrResult> out;
  out.reserve(ns.size());
  for (int n : ns) out.push_back(result_from_histograms(trace, hist, n, max_n));
  return out;
}

inline void check_group_map_shape(const GroupMap& map, const TraceHeader& h) {
  if (map.num_groups < 1 || map.num_groups > h.num_experts)
    throw TraceError("bad group map");
  if (static_cast<int>(map.layers.size()) != h.num_layers)
    throw TraceError("bad group map");
  for (const auto& row : map.layers) {
    if (static_cast<int>(row.size()) != h.num_experts)
      throw TraceError("bad group map");
    for (int g : row)
      if (g < 0 || g >= map.num_groups) throw TraceError("bad group map");
  }
}

}  // namespace detail

/// N-gram expertise profile for several window lengths in one pass.
/// Lengths with no window anywhere get window_count 0 and NaN ratios.
inline std::vector<NgrResult> ngr_profile(const RoutingTrace& trace,
                                          const std::vector<int>& ns) {
  return detail::windows_profile(
      trace, trace.header.num_experts, ns,
      [&](std::size_t token, int layer) -> const std::vector<int>& {
        return trace.tokens[token].layers[static_cast<std::size_t>(layer)].experts;
      });
}

/// N-gram expertise at a single window length.
inline NgrResult ngr(const RoutingTrace& trace, int n) {
  NgrResult out = ngr_profile(trace, {n}).front();
  if (out.window_count == 0) throw TraceError("no windows");
  return out;
}

/// Group-level expertise profile: expert sets are mapped through the group
/// assignment of their layer before windowing.
inline std::vector<NgrResult> gngr_profile(const RoutingTrace& trace,
                                           const GroupMap& map,
                                           const std::vector<int>& ns) {
  detail::check_group_map_shape(map, trace.header);
  std::vector<int> scratch;
  return detail::windows_profile(
      trace, map.num_groups, ns,
      [&, scratch](std::size_t token, int layer) mutable -> const std::vector<int>& {
        const auto& experts =
            trace.tokens[token].layers[static_cast<std::size_t>(layer)].experts;
        const auto& row = map.layers[static_cast<std::size_t>(layer)];
        scratch.clear();
        for (int e : experts) scratch.push_back(row[static_cast<std::size_t>(e)]);
        std::sort(scratch.begin(), scratch.end());
        scratch.erase(std::unique(scratch.begin(), scratch.end()), scratch.end());
        return scratch;
      });
}

/// Group-level expertise at a single window length.
inline NgrResult gngr(const RoutingTrace& trace, const GroupMap& map, int n) {
  NgrResult out = gngr_profile(trace, map, {n}).front();
  if (out.window_count == 0) throw TraceError("no windows");
  return out;
}

/// Marginal-matched baseline: sum of p_e^n over the given expert marginals
/// (which sum to k, one unit of mass per routing slot).
inline double ngr_baseline(const std::vector<double>& marginals, int n) {
  if (n < 1) throw std::invalid_argument("n must be positive");
  if (marginals.empty()) throw std::invalid_argument("empty marginals");
  double total = 0.0;
  for (double p : marginals) {
    if (!(p >= 0.0) || !std::isfinite(p))
      throw std::invalid_argument("negative marginal");
    total += std::pow(p, static_cast<double>(n));
  }
  return total;
}

/// Cross-layer baseline of a trace: mean over layers of the baseline of the
/// layer's empirical marginals count / token_count.
inline double ngr_baseline_from_trace(const ActivationMatrix& counts, int n) {
  if (counts.token_count <= 0) throw TraceError("empty trace");
  double total = 0.0;
  std::vector<double> marginals(static_cast<std::size_t>(counts.num_experts));
  for (int l = 0; l < counts.num_layers; ++l) {
    for (int e = 0; e < counts.num_experts; ++e)
      marginals[static_cast<std::size_t>(e)] =
          static_cast<double>(counts.at(l, e)) /
          static_cast<double>(counts.token_count);
    total += ngr_baseline(marginals, n);
  }
  return total / static_cast<double>(counts.num_layers);
}

/**
 * Infers a per-layer expert grouping from co-activation.
 *
 * Per layer, C[a][b] counts tokens whose expert set contains both a and b
 * (the diagonal is the activation count). Affinities are
 * C[a][b] / sqrt(C[a][a] * C[b][b]), zero when either count is zero.
 * Activated experts are clustered by deterministic average-linkage
 * agglomeration (highest average affinity first, ties broken toward the
 * smallest expert indices) down to min(g, activated) clusters. Cluster
 * labels are assigned in order of each cluster's smallest member; experts
 * never activated are assigned to group 0.
 */
inline GroupMap infer_groups(const RoutingTrace& trace, int g) {
  const int E = trace.header.num_experts;
  const int L = trace.header.num_layers;
  if (g < 1 || g > E) throw TraceError("bad group count");
  if (trace.tokens.empty()) throw TraceError("empty trace");

  GroupMap map;
  map.layers.assign(static_cast<std::size_t>(L),
                    std::vector<int>(static_cast<std::size_t>(E), 0));
  int formed = 0;

  std::vector<std::int64_t> co(static_cast<std::size_t>(E) *
                               static_cast<std::size_t>(E));
  for (int l = 0; l < L; ++l) {
    std::fill(co.begin(), co.end(), 0);
    for (const TokenRecord& t : trace.tokens) {
      const auto& experts = t.layers[static_cast<std::size_t>(l)].experts;
      for (int a : experts)
        for (int b : experts)
          ++co[static_cast<std::size_t>(a) * static_cast<std::size_t>(E) +
               static_cast<std::size_t>(b)];
    }
    auto count = [&](int a, int b) {
      return co[static_cast<std::size_t>(a) * static_cast<std::size_t>(E) +
                static_cast<std::size_t>(b)];
    };

    std::vector<int> activated;
    for (int e = 0; e < E; ++e)
      if (count(e, e) > 0) activated.push_back(e);
    const int target = std::min<int>(g, static_cast<int>(activated.size()));

    // Affinity between activated experts.
    const std::size_t n = activated.size();
    std::vector<double> affinity(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const int a = activated[i];
        const int b = activated[j];
        affinity[i * n + j] =
            static_cast<double>(count(a, b)) /
            std::sqrt(static_cast<double>(count(a, a)) *
                      static_cast<double>(count(b, b)));
      }

    // Average linkage via pairwise-affinity sums (Lance-Williams update).
    std::vector<std::vector<int>> members;  // indices into `activated`
    for (std::size_t i = 0; i < n; ++i) members.push_back({static_cast<int>(i)});
    std::vector<double> link(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) link[i * n + j] = affinity[i * n + j];
    std::vector<char> alive(n, 1);
    std::vector<std::size_t> size(n, 1);
    auto smallest_expert = [&](std::size_t c) {
      int best = activated[static_cast<std::size_t>(members[c].front())];
      for (int idx : members[c])
        best = std::min(best, activated[static_cast<std::size_t>(idx)]);
      return best;
    };
    int clusters = static_cast<int>(n);
    while (clusters > target) {
      double best_avg = -1.0;
      std::size_t best_a = 0;
      std::size_t best_b = 0;
      int best_min_a = 0;
      int best_min_b = 0;
      for (std::size_t a = 0; a < n; ++a) {
        if (!alive[a]) continue;
        for (std::size_t b = a + 1; b < n; ++b) {
          if (!alive[b]) continue;
          const double avg = link[a * n + b] /
                             static_cast<double>(size[a] * size[b]);
          int min_a = smallest_expert(a);
          int min_b = smallest_expert(b);
          if (min_b < min_a) std::swap(min_a, min_b);
          const bool better =
              avg > best_avg ||
              (avg == best_avg &&
               (min_a < best_min_a ||
                (min_a == best_min_a && min_b < best_min_b)));
          if (better) {
            best_avg = avg;
            best_a = a;
            best_b = b;
            best_min_a = min_a;
            best_min_b = min_b;
          }
        }
      }
      for (std::size_t c = 0; c < n; ++c) {
        if (!alive[c] || c == best_a || c == best_b) continue;
        link[best_a * n + c] += link[best_b * n + c];
        link[c * n + best_a] = link[best_a * n + c];
      }
      members[best_a].insert(members[best_a].end(), members[best_b].begin(),
                             members[best_b].end());
      size[best_a] += size[best_b];
      alive[best_b] = 0;
      --clusters;
    }

    // Canonical labels: clusters ordered by their smallest expert.
    std::vector<std::size_t> order;
    for (std::size_t c = 0; c < n; ++c)
      if (alive[c]) order.push_back(c);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return smallest_expert(a) < smallest_expert(b);
    });
    auto& row = map.layers[static_cast<std::size_t>(l)];
    for (std::size_t label = 0; label < order.size(); ++label)
      for (int idx : members[order[label]])
        row[static_cast<std::size_t>(activated[static_cast<std::size_t>(idx)])] =
            static_cast<int>(label);
    // Experts never activated stay at group 0.
    formed = std::max(formed, target);
  }
  map.num_groups = std::max(formed, 1);
  return map;
}

/// Result of the sequence-information lower-bound check.
struct MiBoundResult {
  double ngr = 0.0;
  double bound = 0.0;
  double mi_estimate = 0.0;
  bool holds = false;
};

/**
 * Checks the information-theoretic lower bound on n-gram expertise at one
 * layer: NGR >= E^-(n-1) * exp((I_n - n log E) / n), with I_n the plug-in
 * mutual information between input-symbol n-grams and routing n-grams over
 * the same sliding windows (natural log).
 *
 * Restricted to small discrete instances: top_k = 1, E <= 8, n <= 4, and an
 * input-symbol alphabet of at most 16 carried by every token.
 */
inline MiBoundResult mi_bound_check(const RoutingTrace& trace, int n, int layer) {
  const TraceHeader& h = trace.header;
  if (trace.tokens.empty()) throw TraceError("empty trace");
  if (h.top_k != 1 || h.num_experts > 8 || n < 1 || n > 4)
    throw TraceError("bound check requires small discrete instance");
  if (layer < 0 || layer >= h.num_layers)
    throw TraceError("layer index out of range");
  for (const TokenRecord& t : trace.tokens) {
    if (!t.input_symbol || *t.input_symbol < 0 || *t.input_symbol >= 16)
      throw TraceError("bound check requires small discrete instance");
  }

  std::unordered_map<std::uint64_t, std::int64_t> joint;
  std::unordered_map<std::uint32_t, std::int64_t> sym_marginal;
  std::unordered_map<std::uint32_t, std::int64_t> route_marginal;
  std::int64_t windows = 0;
  std::int64_t consistent = 0;
  for (const auto& [begin, end] : detail::sample_ranges(trace)) {
    const std::int64_t len = static_cast<std::int64_t>(end - begin);
    for (std::int64_t start = 0; start + n <= len; ++start) {
      std::uint32_t sym_code = 0;
      std::uint32_t route_code = 0;
      bool constant = true;
      int first_expert = -1;
      for (int j = 0; j < n; ++j) {
        const TokenRecord& t =
            trace.tokens[begin + static_cast<std::size_t>(start + j)];
        const int sym = *t.input_symbol;
        const int expert =
            t.layers[static_cast<std::size_t>(layer)].experts.front();
        sym_code = sym_code * 16u + static_cast<std::uint32_t>(sym);
        route_code = route_code * 8u + static_cast<std::uint32_t>(expert);
        if (j == 0)
          first_expert = expert;
        else if (expert != first_expert)
          constant = false;
      }
      ++windows;
      if (constant) ++consistent;
      ++joint[(static_cast<std::uint64_t>(sym_code) << 32) | route_code];
      ++sym_marginal[sym_code];
      ++route_marginal[route_code];
    }
  }
  if (windows == 0) throw TraceError("no windows");

  const double W = static_cast<double>(windows);
  double mi = 0.0;
  for (const auto& [key, count] : joint) {
    const std::uint32_t sym_code = static_cast<std::uint32_t>(key >> 32);
    const std::uint32_t route_code = static_cast<std::uint32_t>(key);
    const double pj = static_cast<double>(count) / W;
    const double ps = static_cast<double>(sym_marginal[sym_code]) / W;
    const double pr = static_cast<double>(route_marginal[route_code]) / W;
    mi += pj * std::log(pj / (ps * pr));
  }
  mi = std::max(0.0, mi);

  MiBoundResult out;
  out.mi_estimate = mi;
  out.ngr = static_cast<double>(consistent) / W;
  const double e = static_cast<double>(h.num_experts);
  const double h_max = static_cast<double>(n) * std::log(e);
  out.bound = std::exp((mi - h_max) / static_cast<double>(n)) /
              std::pow(e, static_cast<double>(n - 1));
  out.holds = out.ngr + 1e-12 >= out.bound;
  return out;
}

}  // namespace moescope
