// Small helpers for building traces by hand in tests.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moescope/trace.hpp"

namespace test_util {

inline moescope::TraceHeader make_header(int layers, int experts, int top_k,
                                         std::string model_id = "test") {
  moescope::TraceHeader h;
  h.num_layers = layers;
  h.num_experts = experts;
  h.top_k = top_k;
  h.model_id = std::move(model_id);
  return h;
}

/// Token whose layer expert sets are given outright; no probabilities.
inline moescope::TokenRecord make_token(
    std::int64_t sample, std::int64_t index,
    std::vector<std::vector<int>> experts_per_layer) {
  moescope::TokenRecord t;
  t.sample_id = sample;
  t.token_index = index;
  for (auto& experts : experts_per_layer) {
    moescope::LayerRouting lr;
    lr.experts = std::move(experts);
    t.layers.push_back(std::move(lr));
  }
  return t;
}

/// Single-sample trace from per-token expert sets (same sets in each layer
/// when layers > 1 slices are not given explicitly).
inline moescope::RoutingTrace make_trace(
    int layers, int experts, int top_k,
    const std::vector<std::vector<std::vector<int>>>& tokens) {
  moescope::RoutingTrace trace;
  trace.header = make_header(layers, experts, top_k);
  for (std::size_t i = 0; i < tokens.size(); ++i)
    trace.tokens.push_back(
        make_token(0, static_cast<std::int64_t>(i), tokens[i]));
  return trace;
}

/// k = 1 single-layer trace from a flat expert sequence.
inline moescope::RoutingTrace make_path_trace(int experts,
                                              const std::vector<int>& path,
                                              std::int64_t sample = 0) {
  moescope::RoutingTrace trace;
  trace.header = make_header(1, experts, 1);
  for (std::size_t i = 0; i < path.size(); ++i)
    trace.tokens.push_back(
        make_token(sample, static_cast<std::int64_t>(i), {{path[i]}}));
  return trace;
}

/// Appends another single-sample path to an existing k = 1 trace.
inline void append_path(moescope::RoutingTrace& trace, std::int64_t sample,
                        const std::vector<int>& path) {
  for (std::size_t i = 0; i < path.size(); ++i)
    trace.tokens.push_back(
        make_token(sample, static_cast<std::int64_t>(i), {{path[i]}}));
}

inline moescope::RowProbabilities make_rows(
    int experts, const std::vector<std::vector<double>>& rows) {
  moescope::RowProbabilities p;
  p.num_layers = static_cast<int>(rows.size());
  p.num_experts = experts;
  for (const auto& row : rows)
    p.values.insert(p.values.end(), row.begin(), row.end());
  return p;
}

}  // namespace test_util
