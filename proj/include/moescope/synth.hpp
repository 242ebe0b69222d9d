#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "moescope/rng.hpp"
#include "moescope/trace.hpp"

namespace moescope {

enum class GeneratorKind { uniform, dirichlet_specialist, sticky, grouped_jitter };

/**
 * Parameters for the synthetic trace generators.
 *
 * Per-layer parameters (stay_prob, within_group_switch_prob,
 * group_switch_prob) accept either a single value applied to every layer or
 * one value per layer, which makes layers statistically distinguishable --
 * useful for sweeps that correlate per-layer metric vectors.
 *
 * All generators draw from a single SplitMix64 stream seeded with `seed`,
 * in this exact order:
 *   1. setup: dirichlet_specialist draws one Dirichlet(alpha) preference
 *      vector per layer, layer 0 first;
 *   2. tokens, sample-major then token-major: per token, first the input
 *      symbol (when symbol_alphabet is set), then the salience coin (when
 *      salient_prob is set), then each layer in order.
 * Per layer and token the kind-specific draws are:
 *   - uniform: one sequential-renormalization pick of k experts over equal
 *     weights;
 *   - dirichlet_specialist: the same pick over the layer preference vector;
 *   - sticky: from the second token onward one stay/redraw coin; a redraw
 *     (and the first token) picks k experts over equal weights;
 *   - grouped_jitter: the first token picks a group (one index draw over
 *     groups) and k experts within it; later tokens consume one
 *     group-switch coin (a switch redraws the group uniformly and then the
 *     expert set), then, when the group was kept, one within-group coin
 *     deciding whether the expert set is redrawn inside the group.
 *
 * Emitted dense_probs are the conditional selection distribution given the
 * resolved state: uniform rows are 1/E everywhere; dirichlet rows are the
 * layer preference vector; sticky rows put stay_prob/k on each previous
 * member plus (1-stay_prob)/E everywhere (uniform at sample starts);
 * grouped_jitter rows are uniform over the current group. gate_probs, when
 * enabled, are the dense values of the selected experts renormalized.
 */
struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::uniform;
  int num_layers = 2;
  int num_experts = 8;
  int top_k = 1;
  std::int64_t num_samples = 10;
  std::int64_t tokens_per_sample = 100;
  std::uint64_t seed = 42;
  std::string model_id = "synthetic";

  double alpha = 1.0;                                  // dirichlet_specialist
  std::vector<double> stay_prob{0.9};                  // sticky
  GroupMap group_map;                                  // grouped_jitter
  std::vector<double> within_group_switch_prob{1.0};   // grouped_jitter
  std::vector<double> group_switch_prob{0.0};          // grouped_jitter

  bool emit_dense = true;
  bool emit_gate = false;
  std::optional<double> salient_prob;
  std::optional<int> symbol_alphabet;
};

namespace detail {

inline void check_common(const GeneratorSpec& spec) {
  if (spec.num_layers < 1) throw std::invalid_argument("num_layers must be positive");
  if (spec.num_experts < 2) throw std::invalid_argument("num_experts must be at least 2");
  if (spec.top_k < 1 || spec.top_k > spec.num_experts)
    throw std::invalid_argument("top_k out of range");
  if (spec.num_samples < 1 || spec.tokens_per_sample < 1)
    throw std::invalid_argument("sample counts must be positive");
  if (spec.salient_prob && (*spec.salient_prob < 0.0 || *spec.salient_prob > 1.0))
    throw std::invalid_argument("salient_prob out of range");
  if (spec.symbol_alphabet && (*spec.symbol_alphabet < 2 || *spec.symbol_alphabet > 16))
    throw std::invalid_argument("symbol alphabet out of range");
}

/// Resolves a scalar-or-per-layer parameter list for the given layer.
inline double per_layer(const std::vector<double>& values, int layer,
                        int num_layers, const char* name) {
  if (values.size() == 1) return values[0];
  if (static_cast<int>(values.size()) != num_layers)
    throw std::invalid_argument(std::string(name) +
                                " needs one value or one per layer");
  return values[static_cast<std::size_t>(layer)];
}

inline void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0))
    throw std::invalid_argument(std::string(name) + " out of range");
}

struct GroupLayout {
  std::vector<std::vector<int>> members;  // per group, ascending expert ids
};

inline GroupLayout check_group_map(const GroupMap& map, int num_layers,
                                   int num_experts, int top_k) {
  if (map.num_groups < 1) throw std::invalid_argument("bad group map");
  if (map.layers.empty()) throw std::invalid_argument("bad group map");
  // The generator keeps one partition for all layers; a per-layer map is
  // accepted when every layer row is identical.
  if (static_cast<int>(map.layers.size()) != 1 &&
      static_cast<int>(map.layers.size()) != num_layers)
    throw std::invalid_argument("bad group map");
  for (const auto& row : map.layers) {
    if (static_cast<int>(row.size()) != num_experts)
      throw std::invalid_argument("bad group map");
    if (row != map.layers.front()) throw std::invalid_argument("bad group map");
  }
  GroupLayout layout;
  layout.members.assign(static_cast<std::size_t>(map.num_groups), {});
  const auto& row = map.layers.front();
  for (int e = 0; e < num_experts; ++e) {
    int g = row[static_cast<std::size_t>(e)];
    if (g < 0 || g >= map.num_groups) throw std::invalid_argument("bad group map");
    layout.members[static_cast<std::size_t>(g)].push_back(e);
  }
  for (const auto& members : layout.members)
    if (static_cast<int>(members.size()) < top_k)
      throw std::invalid_argument("group too small");
  return layout;
}

}  // namespace detail

/// Contiguous equal-size partition of E experts into g groups, replicated
/// across all layers. E must be divisible by g.
inline GroupMap uniform_partition(int num_layers, int num_experts, int groups) {
  if (groups < 1 || groups > num_experts || num_experts % groups != 0)
    throw std::invalid_argument("bad group count");
  GroupMap map;
  map.num_groups = groups;
  std::vector<int> row(static_cast<std::size_t>(num_experts));
  const int size = num_experts / groups;
  for (int e = 0; e < num_experts; ++e) row[static_cast<std::size_t>(e)] = e / size;
  map.layers.assign(static_cast<std::size_t>(num_layers), row);
  return map;
}

namespace detail {

class TraceBuilder {
 public:
  TraceBuilder(const GeneratorSpec& spec, Rng& rng)
      : spec_(spec), rng_(rng) {
    trace_.header.format_version = 1;
    trace_.header.model_id = spec.model_id;
    trace_.header.num_layers = spec.num_layers;
    trace_.header.num_experts = spec.num_experts;
    trace_.header.top_k = spec.top_k;
    trace_.tokens.reserve(static_cast<std::size_t>(spec.num_samples *
                                                   spec.tokens_per_sample));
  }

  /// Runs the shared sample/token/layer loop; `route` fills one layer's
  /// expert set and conditional distribution for the current token.
  template <typename RouteFn>
  RoutingTrace run(RouteFn&& route) {
    const int L = spec_.num_layers;
    for (std::int64_t s = 0; s < spec_.num_samples; ++s) {
      for (std::int64_t t = 0; t < spec_.tokens_per_sample; ++t) {
        TokenRecord token;
        token.sample_id = s;
        token.token_index = t;
        if (spec_.symbol_alphabet)
          token.input_symbol = static_cast<int>(
              rng_.index(static_cast<std::uint64_t>(*spec_.symbol_alphabet)));
        if (spec_.salient_prob) token.salient = rng_.coin(*spec_.salient_prob);
        token.layers.resize(static_cast<std::size_t>(L));
        for (int l = 0; l < L; ++l) {
          LayerRouting& lr = token.layers[static_cast<std::size_t>(l)];
          std::vector<double> conditional;
          route(l, t, lr.experts, conditional);
          std::sort(lr.experts.begin(), lr.experts.end());
          if (spec_.emit_gate) {
            std::vector<double> gate;
            gate.reserve(lr.experts.size());
            double total = 0.0;
            for (int e : lr.experts) total += conditional[static_cast<std::size_t>(e)];
            for (int e : lr.experts)
              gate.push_back(total > 0.0
                                 ? conditional[static_cast<std::size_t>(e)] / total
                                 : 1.0 / static_cast<double>(lr.experts.size()));
            lr.gate_probs = std::move(gate);
          }
          if (spec_.emit_dense) lr.dense_probs = std::move(conditional);
        }
        trace_.tokens.push_back(std::move(token));
      }
    }
    return std::move(trace_);
  }

 private:
  const GeneratorSpec& spec_;
  Rng& rng_;
  RoutingTrace trace_;
};

}  // namespace detail

/// Tokens route independently and uniformly: every row of the selection
/// frequency matrix converges to 1/E.
inline RoutingTrace gen_uniform(const GeneratorSpec& spec) {
  detail::check_common(spec);
  Rng rng(spec.seed);
  detail::TraceBuilder builder(spec, rng);
  const std::vector<double> weights(static_cast<std::size_t>(spec.num_experts), 1.0);
  const std::vector<double> dense(static_cast<std::size_t>(spec.num_experts),
                                  1.0 / static_cast<double>(spec.num_experts));
  return builder.run([&](int, std::int64_t, std::vector<int>& experts,
                         std::vector<double>& conditional) {
    experts = rng.sample_without_replacement(weights, spec.top_k);
    conditional = dense;
  });
}

/// Each layer gets a fixed Dirichlet(alpha) preference vector; tokens draw
/// k distinct experts from it independently. Small alpha concentrates the
/// preference on few experts.
inline RoutingTrace gen_dirichlet_specialist(const GeneratorSpec& spec) {
  detail::check_common(spec);
  if (!(spec.alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  Rng rng(spec.seed);
  std::vector<std::vector<double>> preference;
  preference.reserve(static_cast<std::size_t>(spec.num_layers));
  for (int l = 0; l < spec.num_layers; ++l)
    preference.push_back(rng.dirichlet(spec.alpha, spec.num_experts));
  detail::TraceBuilder builder(spec, rng);
  return builder.run([&](int layer, std::int64_t, std::vector<int>& experts,
                         std::vector<double>& conditional) {
    experts = rng.sample_without_replacement(
        preference[static_cast<std::size_t>(layer)], spec.top_k);
    conditional = preference[static_cast<std::size_t>(layer)];
  });
}

/// Markov routing: each token keeps the previous k-set with probability
/// stay_prob, otherwise redraws a fresh uniform k-set (which may coincide).
/// For k = 1 the per-step repeat probability is
/// q = stay_prob + (1 - stay_prob) / E.
inline RoutingTrace gen_sticky(const GeneratorSpec& spec) {
  detail::check_common(spec);
  for (std::size_t i = 0; i < spec.stay_prob.size(); ++i)
    detail::check_probability(spec.stay_prob[i], "stay_prob");
  Rng rng(spec.seed);
  const int E = spec.num_experts;
  const std::vector<double> weights(static_cast<std::size_t>(E), 1.0);
  const std::vector<double> uniform_dense(static_cast<std::size_t>(E),
                                          1.0 / static_cast<double>(E));
  std::vector<std::vector<int>> previous(
      static_cast<std::size_t>(spec.num_layers));
  detail::TraceBuilder builder(spec, rng);
  return builder.run([&](int layer, std::int64_t t, std::vector<int>& experts,
                         std::vector<double>& conditional) {
    const double stay =
        detail::per_layer(spec.stay_prob, layer, spec.num_layers, "stay_prob");
    auto& prev = previous[static_cast<std::size_t>(layer)];
    if (t == 0) {
      conditional = uniform_dense;
      experts = rng.sample_without_replacement(weights, spec.top_k);
    } else {
      conditional.assign(static_cast<std::size_t>(E),
                         (1.0 - stay) / static_cast<double>(E));
      for (int e : prev)
        conditional[static_cast<std::size_t>(e)] +=
            stay / static_cast<double>(spec.top_k);
      if (rng.coin(stay)) {
        experts = prev;
      } else {
        experts = rng.sample_without_replacement(weights, spec.top_k);
      }
    }
    prev = experts;
  });
}

/// Group-structured routing: per layer and sample a group is picked
/// uniformly at the first token; later tokens may move to a fresh uniform
/// group with probability group_switch_prob (0 keeps the group for the whole
/// sample). Expert k-sets are drawn uniformly inside the current group, and
/// with probability 1 - within_group_switch_prob a token keeps the previous
/// set instead of redrawing.
inline RoutingTrace gen_grouped_jitter(const GeneratorSpec& spec) {
  detail::check_common(spec);
  for (double p : spec.within_group_switch_prob)
    detail::check_probability(p, "within_group_switch_prob");
  for (double p : spec.group_switch_prob)
    detail::check_probability(p, "group_switch_prob");
  const detail::GroupLayout layout = detail::check_group_map(
      spec.group_map, spec.num_layers, spec.num_experts, spec.top_k);
  const int G = spec.group_map.num_groups;
  Rng rng(spec.seed);

  struct LayerState {
    int group = -1;
    std::vector<int> experts;
  };
  std::vector<LayerState> state(static_cast<std::size_t>(spec.num_layers));

  auto draw_in_group = [&](int group, std::vector<int>& experts) {
    const auto& members = layout.members[static_cast<std::size_t>(group)];
    const std::vector<double> weights(members.size(), 1.0);
    std::vector<int> local = rng.sample_without_replacement(weights, spec.top_k);
    experts.clear();
    for (int idx : local) experts.push_back(members[static_cast<std::size_t>(idx)]);
  };
  auto group_dense = [&](int group, std::vector<double>& conditional) {
    conditional.assign(static_cast<std::size_t>(spec.num_experts), 0.0);
    const auto& members = layout.members[static_cast<std::size_t>(group)];
    for (int e : members)
      conditional[static_cast<std::size_t>(e)] =
          1.0 / static_cast<double>(members.size());
  };

  detail::TraceBuilder builder(spec, rng);
  return builder.run([&](int layer, std::int64_t t, std::vector<int>& experts,
                         std::vector<double>& conditional) {
    const double within = detail::per_layer(spec.within_group_switch_prob,
                                            layer, spec.num_layers,
                                            "within_group_switch_prob");
    const double gswitch = detail::per_layer(
        spec.group_switch_prob, layer, spec.num_layers, "group_switch_prob");
    auto& st = state[static_cast<std::size_t>(layer)];
    if (t == 0) {
      st.group = static_cast<int>(rng.index(static_cast<std::uint64_t>(G)));
      draw_in_group(st.group, st.experts);
    } else if (rng.coin(gswitch)) {
      st.group = static_cast<int>(rng.index(static_cast<std::uint64_t>(G)));
      draw_in_group(st.group, st.experts);
    } else if (rng.coin(within)) {
      draw_in_group(st.group, st.experts);
    }
    group_dense(st.group, conditional);
    experts = st.experts;
  });
}

/// Dispatch on spec.kind.
inline RoutingTrace generate(const GeneratorSpec& spec) {
  switch (spec.kind) {
    case GeneratorKind::uniform: return gen_uniform(spec);
    case GeneratorKind::dirichlet_specialist: return gen_dirichlet_specialist(spec);
    case GeneratorKind::sticky: return gen_sticky(spec);
    case GeneratorKind::grouped_jitter: return gen_grouped_jitter(spec);
  }
  throw std::invalid_argument("unknown generator kind");
}

}  // namespace moescope
