#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace moescope {

/// Error raised by trace parsing, validation, and metric preconditions.
class TraceError : public std::runtime_error {
 public:
  explicit TraceError(const std::string& message, std::int64_t line = 0)
      : std::runtime_error(message), line_(line) {}

  /// 1-based line number for file-derived errors, 0 otherwise.
  std::int64_t line() const { return line_; }

 private:
  std::int64_t line_;
};

/// Header record of a routing trace: model shape plus optional group count.
struct TraceHeader {
  int format_version = 1;
  std::string model_id;
  int num_layers = 0;
  int num_experts = 0;
  int top_k = 0;
  std::optional<int> group_count;

  bool operator==(const TraceHeader&) const = default;
};

/// One layer's routing decision for one token.
///
/// `experts` holds the top-k distinct expert indices in ascending order.
/// `gate_probs`, when present, is aligned with `experts`; `dense_probs`,
/// when present, is the full router distribution over all experts.
struct LayerRouting {
  std::vector<int> experts;
  std::optional<std::vector<double>> gate_probs;
  std::optional<std::vector<double>> dense_probs;

  bool operator==(const LayerRouting&) const = default;
};

/// Routing decisions of a single token across all layers.
struct TokenRecord {
  std::int64_t sample_id = 0;
  std::int64_t token_index = 0;
  std::optional<bool> salient;
  std::optional<int> input_symbol;
  std::vector<LayerRouting> layers;

  bool operator==(const TokenRecord&) const = default;
};

/// A full routing trace: header plus token records grouped by sample.
struct RoutingTrace {
  TraceHeader header;
  std::vector<TokenRecord> tokens;

  bool operator==(const RoutingTrace&) const = default;
};

/// Per-layer expert assignment used for group-level sequence metrics.
/// `layers[l][e]` is the group index of expert e at layer l.
struct GroupMap {
  int num_groups = 0;
  std::vector<std::vector<int>> layers;

  bool operator==(const GroupMap&) const = default;
};

/// Raw selection counts: counts(l, e) = number of tokens whose top-k set at
/// layer l contains expert e.
struct ActivationMatrix {
  int num_layers = 0;
  int num_experts = 0;
  int top_k = 0;
  std::int64_t token_count = 0;
  std::vector<std::int64_t> counts;

  std::int64_t& at(int layer, int expert) {
    return counts[static_cast<std::size_t>(layer) *
                      static_cast<std::size_t>(num_experts) +
                  static_cast<std::size_t>(expert)];
  }
  std::int64_t at(int layer, int expert) const {
    return counts[static_cast<std::size_t>(layer) *
                      static_cast<std::size_t>(num_experts) +
                  static_cast<std::size_t>(expert)];
  }
};

/// Activation counts rescaled so that every row sums to E / k.
struct NormalizedMatrix {
  int num_layers = 0;
  int num_experts = 0;
  int top_k = 0;
  std::vector<double> values;

  double& at(int layer, int expert) {
    return values[static_cast<std::size_t>(layer) *
                      static_cast<std::size_t>(num_experts) +
                  static_cast<std::size_t>(expert)];
  }
  double at(int layer, int expert) const {
    return values[static_cast<std::size_t>(layer) *
                      static_cast<std::size_t>(num_experts) +
                  static_cast<std::size_t>(expert)];
  }
};

/// Row-stochastic selection frequencies, one distribution per layer.
struct RowProbabilities {
  int num_layers = 0;
  int num_experts = 0;
  std::vector<double> values;

  double& at(int layer, int expert) {
    return values[static_cast<std::size_t>(layer) *
                      static_cast<std::size_t>(num_experts) +
                  static_cast<std::size_t>(expert)];
  }
  double at(int layer, int expert) const {
    return values[static_cast<std::size_t>(layer) *
                      static_cast<std::size_t>(num_experts) +
                  static_cast<std::size_t>(expert)];
  }
};

/// Policy for layers whose activation row is entirely zero.
enum class ZeroRowPolicy { error, uniform };

/// Counts expert selections per layer over the whole trace, or over a single
/// layer when `layer_filter` is set (yielding a 1-row matrix).
inline ActivationMatrix build_activation_matrix(
    const RoutingTrace& trace, std::optional<int> layer_filter = std::nullopt) {
  const int L = trace.header.num_layers;
  const int E = trace.header.num_experts;
  if (trace.tokens.empty()) throw TraceError("empty trace");
  if (layer_filter && (*layer_filter < 0 || *layer_filter >= L))
    throw TraceError("layer index out of range");

  ActivationMatrix out;
  out.num_layers = layer_filter ? 1 : L;
  out.num_experts = E;
  out.top_k = trace.header.top_k;
  out.token_count = static_cast<std::int64_t>(trace.tokens.size());
  out.counts.assign(static_cast<std::size_t>(out.num_layers) *
                        static_cast<std::size_t>(E),
                    0);
  for (const TokenRecord& token : trace.tokens) {
    if (static_cast<int>(token.layers.size()) != L)
      throw TraceError("inconsistent record");
    for (int l = 0; l < L; ++l) {
      if (layer_filter && l != *layer_filter) continue;
      const int row = layer_filter ? 0 : l;
      const LayerRouting& lr = token.layers[static_cast<std::size_t>(l)];
      if (static_cast<int>(lr.experts.size()) != trace.header.top_k)
        throw TraceError("inconsistent record");
      for (int e : lr.experts) {
        if (e < 0 || e >= E) throw TraceError("inconsistent record");
        ++out.at(row, e);
      }
    }
  }
  return out;
}

/// Rescales counts so each row sums to E / k: value = E * count / (k * row_sum).
inline NormalizedMatrix normalize_matrix(const ActivationMatrix& counts,
                                         ZeroRowPolicy policy = ZeroRowPolicy::error) {
  NormalizedMatrix out;
  out.num_layers = counts.num_layers;
  out.num_experts = counts.num_experts;
  out.top_k = counts.top_k;
  out.values.assign(counts.counts.size(), 0.0);
  const double E = static_cast<double>(counts.num_experts);
  const double k = static_cast<double>(counts.top_k);
  for (int l = 0; l < counts.num_layers; ++l) {
    std::int64_t row_sum = 0;
    for (int e = 0; e < counts.num_experts; ++e) row_sum += counts.at(l, e);
    if (row_sum == 0) {
      if (policy == ZeroRowPolicy::error) throw TraceError("unobserved layer");
      for (int e = 0; e < counts.num_experts; ++e) out.at(l, e) = 1.0 / k;
      continue;
    }
    for (int e = 0; e < counts.num_experts; ++e)
      out.at(l, e) = E * static_cast<double>(counts.at(l, e)) /
                     (k * static_cast<double>(row_sum));
  }
  return out;
}

/// Renormalizes each row of the scaled matrix to a probability distribution.
inline RowProbabilities row_probabilities(const NormalizedMatrix& scaled) {
  RowProbabilities out;
  out.num_layers = scaled.num_layers;
  out.num_experts = scaled.num_experts;
  out.values.assign(scaled.values.size(), 0.0);
  for (int l = 0; l < scaled.num_layers; ++l) {
    double row_sum = 0.0;
    for (int e = 0; e < scaled.num_experts; ++e) row_sum += scaled.at(l, e);
    if (!(row_sum > 0.0)) throw TraceError("unobserved layer");
    for (int e = 0; e < scaled.num_experts; ++e)
      out.at(l, e) = scaled.at(l, e) / row_sum;
  }
  return out;
}

/// Keeps only tokens whose salience flag equals `keep_salient`, re-indexing
/// token positions contiguously within each surviving sample.
inline RoutingTrace filter_by_salience(const RoutingTrace& trace,
                                       bool keep_salient) {
  RoutingTrace out;
  out.header = trace.header;
  std::int64_t current_sample = -1;
  std::int64_t next_index = 0;
  for (const TokenRecord& token : trace.tokens) {
    if (!token.salient.has_value()) throw TraceError("salience mask absent");
    if (*token.salient != keep_salient) continue;
    TokenRecord kept = token;
    if (kept.sample_id != current_sample) {
      current_sample = kept.sample_id;
      next_index = 0;
    }
    kept.token_index = next_index++;
    out.tokens.push_back(std::move(kept));
  }
  return out;
}

}  // namespace moescope
