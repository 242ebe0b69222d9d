#include "moescope/sequence_metrics.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

#include <gtest/gtest.h>

#include "moescope/synth.hpp"
#include "moescope/trace.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace {

using namespace moescope;
using test_util::append_path;
using test_util::make_path_trace;
using test_util::make_trace;

// Compares library counts with the brute-force oracle, exactly.
void expect_matches_oracle(const RoutingTrace& trace, int max_n,
                           const GroupMap* map = nullptr) {
  std::vector<int> ns;
  for (int n = 1; n <= max_n; ++n) ns.push_back(n);
  const std::vector<NgrResult> profile =
      map ? gngr_profile(trace, *map, ns) : ngr_profile(trace, ns);
  for (int n = 1; n <= max_n; ++n) {
    const NgrResult& r = profile[static_cast<std::size_t>(n - 1)];
    const auto counts = oracles::window_counts_oracle(trace, n, map);
    ASSERT_EQ(r.layer_windows.size(), counts.size());
    for (std::size_t l = 0; l < counts.size(); ++l) {
      EXPECT_EQ(r.layer_windows[l], counts[l].windows)
          << "n=" << n << " layer=" << l;
      EXPECT_EQ(r.layer_consistent[l], counts[l].consistent)
          << "n=" << n << " layer=" << l;
    }
    if (r.window_count > 0) {
      EXPECT_DOUBLE_EQ(r.aggregate, oracles::pooled_ratio_oracle(counts));
    }
  }
}

TEST(Ngr, HandWorkedExample) {
  // Sets {0,1},{1,2},{1,3},{0,1},{2,3}: of the three length-3 windows the
  // first two share expert 1, the last shares nothing.
  const RoutingTrace trace = make_trace(
      1, 4, 2, {{{0, 1}}, {{1, 2}}, {{1, 3}}, {{0, 1}}, {{2, 3}}});
  const NgrResult r = ngr(trace, 3);
  EXPECT_EQ(r.window_count, 3);
  EXPECT_EQ(r.consistent_count, 2);
  EXPECT_DOUBLE_EQ(r.aggregate, 2.0 / 3.0);
}

TEST(Ngr, LengthOneWindowsAreAlwaysConsistent) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::uniform;
  spec.num_layers = 2;
  spec.num_experts = 5;
  spec.top_k = 2;
  spec.num_samples = 3;
  spec.tokens_per_sample = 20;
  const RoutingTrace trace = generate(spec);
  const NgrResult r = ngr(trace, 1);
  EXPECT_DOUBLE_EQ(r.aggregate, 1.0);
  EXPECT_EQ(r.window_count, r.consistent_count);
}

TEST(Ngr, MatchesOracleOnGeneratorTraces) {
  {
    GeneratorSpec spec;
    spec.kind = GeneratorKind::sticky;
    spec.num_layers = 2;
    spec.num_experts = 6;
    spec.top_k = 2;
    spec.stay_prob = {0.7};
    spec.num_samples = 8;
    spec.tokens_per_sample = 50;
    spec.seed = 5;
    expect_matches_oracle(generate(spec), 6);
  }
  {
    GeneratorSpec spec;
    spec.kind = GeneratorKind::uniform;
    spec.num_layers = 1;
    spec.num_experts = 4;
    spec.top_k = 1;
    spec.num_samples = 5;
    spec.tokens_per_sample = 40;
    spec.seed = 6;
    expect_matches_oracle(generate(spec), 6);
  }
  {
    GeneratorSpec spec;
    spec.kind = GeneratorKind::dirichlet_specialist;
    spec.num_layers = 3;
    spec.num_experts = 8;
    spec.top_k = 3;
    spec.alpha = 0.3;
    spec.num_samples = 4;
    spec.tokens_per_sample = 30;
    spec.seed = 7;
    expect_matches_oracle(generate(spec), 5);
  }
}

TEST(Ngr, MatchesOracleOnUnequalSampleLengths) {
  RoutingTrace trace = make_path_trace(4, {0, 1, 1, 2});
  append_path(trace, 1, {2, 2});
  append_path(trace, 2, {3, 3, 3, 3, 3, 1, 1});
  append_path(trace, 3, {0});
  expect_matches_oracle(trace, 6);
  // Sanity on one value: length-2 windows are (0,1)(1,1)(1,2) + (2,2) +
  // (3,3)(3,3)(3,3)(3,3)(3,1)(1,1); 7 of 10 repeat.
  EXPECT_DOUBLE_EQ(ngr(trace, 2).aggregate, 0.7);
}

TEST(Gngr, MatchesOracleWithGroupMaps) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::grouped_jitter;
  spec.num_layers = 2;
  spec.num_experts = 8;
  spec.top_k = 2;
  spec.group_map = uniform_partition(2, 8, 2);
  spec.group_switch_prob = {0.3};
  spec.within_group_switch_prob = {0.8};
  spec.num_samples = 6;
  spec.tokens_per_sample = 40;
  spec.seed = 8;
  const RoutingTrace trace = generate(spec);
  const GroupMap pairs = uniform_partition(2, 8, 4);
  expect_matches_oracle(trace, 5, &spec.group_map);
  expect_matches_oracle(trace, 5, &pairs);
}

TEST(Gngr, IdentityMapReproducesNgr) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::sticky;
  spec.num_layers = 2;
  spec.num_experts = 6;
  spec.top_k = 2;
  spec.stay_prob = {0.6};
  spec.num_samples = 4;
  spec.tokens_per_sample = 30;
  const RoutingTrace trace = generate(spec);
  const GroupMap identity = uniform_partition(2, 6, 6);
  const std::vector<int> ns{1, 2, 3, 4, 5};
  const auto a = ngr_profile(trace, ns);
  const auto b = gngr_profile(trace, identity, ns);
  for (std::size_t i = 0; i < ns.size(); ++i) {
    EXPECT_EQ(a[i].consistent_count, b[i].consistent_count);
    EXPECT_EQ(a[i].window_count, b[i].window_count);
  }
}

TEST(Gngr, SingleGroupIsAlwaysConsistent) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::uniform;
  spec.num_layers = 1;
  spec.num_experts = 6;
  spec.top_k = 1;
  spec.num_samples = 3;
  spec.tokens_per_sample = 25;
  const RoutingTrace trace = generate(spec);
  const GroupMap one = uniform_partition(1, 6, 1);
  EXPECT_DOUBLE_EQ(gngr(trace, one, 4).aggregate, 1.0);
}

TEST(Gngr, GroupLevelPersistenceBeatsExpertJitter) {
  // Full within-group churn but no group switches: expert windows break
  // constantly while every group window is consistent.
  GeneratorSpec spec;
  spec.kind = GeneratorKind::grouped_jitter;
  spec.num_layers = 1;
  spec.num_experts = 8;
  spec.top_k = 1;
  spec.group_map = uniform_partition(1, 8, 2);
  spec.group_switch_prob = {0.0};
  spec.within_group_switch_prob = {1.0};
  spec.num_samples = 5;
  spec.tokens_per_sample = 100;
  const RoutingTrace trace = generate(spec);
  EXPECT_DOUBLE_EQ(gngr(trace, spec.group_map, 5).aggregate, 1.0);
  EXPECT_LT(ngr(trace, 5).aggregate, 0.5);
}

TEST(Ngr, MonotoneInWindowLengthAndDominatedByGroups) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::sticky;
  spec.num_layers = 2;
  spec.num_experts = 8;
  spec.top_k = 2;
  spec.stay_prob = {0.8, 0.4};
  spec.num_samples = 5;
  spec.tokens_per_sample = 60;
  const RoutingTrace trace = generate(spec);
  const GroupMap map = uniform_partition(2, 8, 4);
  std::vector<int> ns;
  for (int n = 1; n <= 20; ++n) ns.push_back(n);
  const auto plain = ngr_profile(trace, ns);
  const auto grouped = gngr_profile(trace, map, ns);
  for (std::size_t i = 0; i < ns.size(); ++i) {
    if (i > 0 && plain[i].window_count > 0) {
      EXPECT_LE(plain[i].aggregate, plain[i - 1].aggregate) << "n=" << ns[i];
    }
    if (plain[i].window_count > 0) {
      EXPECT_GE(grouped[i].aggregate, plain[i].aggregate) << "n=" << ns[i];
    }
  }
}

TEST(Ngr, IidUniformRoutingMatchesTheClosedForm) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::uniform;
  spec.num_layers = 1;
  spec.num_experts = 4;
  spec.top_k = 1;
  spec.num_samples = 10;
  spec.tokens_per_sample = 2000;
  spec.seed = 11;
  const RoutingTrace trace = generate(spec);
  for (int n = 2; n <= 4; ++n) {
    const NgrResult r = ngr(trace, n);
    const double p = std::pow(4.0, 1.0 - static_cast<double>(n));
    const double sigma_indep =
        std::sqrt(p * (1.0 - p) / static_cast<double>(r.window_count));
    // Overlapping windows are positively correlated; 2n-1 covers the
    // variance inflation of an n-dependent sliding count.
    const double slack =
        3.0 * std::sqrt(2.0 * static_cast<double>(n) - 1.0) * sigma_indep;
    EXPECT_NEAR(r.aggregate, p, slack) << "n=" << n;
  }
}

TEST(Ngr, NoWindowBehaviour) {
  const RoutingTrace trace = make_path_trace(4, {0, 1});
  EXPECT_THROW(ngr(trace, 3), TraceError);
  const auto profile = ngr_profile(trace, {3});
  EXPECT_EQ(profile[0].window_count, 0);
  EXPECT_TRUE(std::isnan(profile[0].aggregate));
  EXPECT_TRUE(std::isnan(profile[0].per_layer[0]));
  EXPECT_THROW(ngr_profile(trace, {0}), std::invalid_argument);
  EXPECT_THROW(ngr_profile(RoutingTrace{}, {2}), TraceError);
}

TEST(Ngr, RejectsCorruptRecords) {
  RoutingTrace trace = make_path_trace(4, {0, 1, 2});
  trace.tokens[1].layers[0].experts[0] = 9;
  EXPECT_THROW(ngr(trace, 2), TraceError);
  RoutingTrace ragged = make_path_trace(4, {0, 1, 2});
  ragged.tokens[2].layers.clear();
  EXPECT_THROW(ngr(ragged, 2), TraceError);
}

TEST(Ngr, InvariantUnderExpertRelabeling) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::sticky;
  spec.num_layers = 1;
  spec.num_experts = 5;
  spec.top_k = 1;
  spec.stay_prob = {0.6};
  spec.num_samples = 4;
  spec.tokens_per_sample = 50;
  RoutingTrace trace = generate(spec);
  RoutingTrace relabeled = trace;
  const std::vector<int> perm{4, 2, 0, 3, 1};
  for (TokenRecord& t : relabeled.tokens)
    for (LayerRouting& lr : t.layers)
      for (int& e : lr.experts) e = perm[static_cast<std::size_t>(e)];
  for (int n = 1; n <= 5; ++n)
    EXPECT_EQ(ngr(trace, n).consistent_count,
              ngr(relabeled, n).consistent_count);
}

TEST(Baseline, HandValues) {
  EXPECT_NEAR(ngr_baseline({0.9, 0.1}, 3), 0.730, 1e-12);
  // 128 experts, 8 slots: marginals 1/16 each, so the order-10 baseline is
  // 128 * 16^-10 = 2^-33.
  const std::vector<double> uniform(128, 8.0 / 128.0);
  EXPECT_NEAR(ngr_baseline(uniform, 10), std::pow(2.0, -33.0), 1e-15);
  EXPECT_DOUBLE_EQ(ngr_baseline({0.25, 0.25, 0.25, 0.25}, 1), 1.0);
  EXPECT_THROW(ngr_baseline({0.5, -0.1}, 2), std::invalid_argument);
  EXPECT_THROW(ngr_baseline({}, 2), std::invalid_argument);
  EXPECT_THROW(ngr_baseline({0.5}, 0), std::invalid_argument);
}

TEST(Baseline, FromTraceAveragesLayerMarginals) {
  // Layer 0 routes 3 of 4 tokens to expert 0; layer 1 splits 2/2.
  const RoutingTrace trace = make_trace(2, 2, 1, {{{0}, {0}},
                                                  {{0}, {0}},
                                                  {{0}, {1}},
                                                  {{1}, {1}}});
  const ActivationMatrix counts = build_activation_matrix(trace);
  const double layer0 = 0.75 * 0.75 + 0.25 * 0.25;
  const double layer1 = 0.5 * 0.5 + 0.5 * 0.5;
  EXPECT_NEAR(ngr_baseline_from_trace(counts, 2), 0.5 * (layer0 + layer1),
              1e-12);
  EXPECT_THROW(ngr_baseline_from_trace(ActivationMatrix{}, 2), TraceError);
}

TEST(InferGroups, RecoversPlantedBlocks) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::grouped_jitter;
  spec.num_layers = 2;
  spec.num_experts = 8;
  spec.top_k = 2;
  spec.group_map = uniform_partition(2, 8, 4);
  spec.group_switch_prob = {0.3};
  spec.within_group_switch_prob = {1.0};
  spec.num_samples = 20;
  spec.tokens_per_sample = 100;
  spec.seed = 13;
  const RoutingTrace trace = generate(spec);
  const GroupMap inferred = infer_groups(trace, 4);
  EXPECT_EQ(inferred.num_groups, 4);
  EXPECT_EQ(inferred.layers, spec.group_map.layers);
}

TEST(InferGroups, CanonicalLabelsFollowSmallestMember) {
  // Interleaved planted groups {0,4},{1,5},{2,6},{3,7}: recovery must name
  // them 0..3 by their smallest expert, reproducing the planted row.
  GroupMap planted;
  planted.num_groups = 4;
  planted.layers = {{0, 1, 2, 3, 0, 1, 2, 3}};
  GeneratorSpec spec;
  spec.kind = GeneratorKind::grouped_jitter;
  spec.num_layers = 1;
  spec.num_experts = 8;
  spec.top_k = 2;
  spec.group_map = planted;
  spec.group_switch_prob = {0.4};
  spec.within_group_switch_prob = {1.0};
  spec.num_samples = 20;
  spec.tokens_per_sample = 50;
  spec.seed = 17;
  const RoutingTrace trace = generate(spec);
  const GroupMap inferred = infer_groups(trace, 4);
  EXPECT_EQ(inferred.layers, planted.layers);
}

TEST(InferGroups, UnactivatedExpertsLandInGroupZero) {
  const RoutingTrace trace = make_path_trace(5, {0, 0, 1, 1});
  const GroupMap map = infer_groups(trace, 2);
  EXPECT_EQ(map.num_groups, 2);
  EXPECT_EQ(map.layers[0], (std::vector<int>{0, 1, 0, 0, 0}));
}

TEST(InferGroups, BoundsAndErrors) {
  const RoutingTrace trace = make_path_trace(4, {0, 1, 2, 3});
  EXPECT_THROW(infer_groups(trace, 0), TraceError);
  EXPECT_THROW(infer_groups(trace, 5), TraceError);
  EXPECT_THROW(infer_groups(RoutingTrace{}, 2), TraceError);

  // g = 1 collapses everything; the grouped ratio is then exactly 1.
  const GroupMap one = infer_groups(trace, 1);
  EXPECT_EQ(one.num_groups, 1);
  EXPECT_DOUBLE_EQ(gngr(trace, one, 2).aggregate, 1.0);

  // g = E with every expert active is the identity grouping.
  const GroupMap identity = infer_groups(trace, 4);
  EXPECT_EQ(identity.num_groups, 4);
  EXPECT_EQ(identity.layers[0], (std::vector<int>{0, 1, 2, 3}));
  for (int n = 1; n <= 3; ++n)
    EXPECT_EQ(gngr(trace, identity, n).consistent_count,
              ngr(trace, n).consistent_count);
}

TEST(Gngr, MapShapeValidation) {
  const RoutingTrace trace = make_path_trace(4, {0, 1, 2});
  GroupMap map = uniform_partition(1, 4, 2);
  map.layers[0][0] = 7;
  EXPECT_THROW(gngr(trace, map, 2), TraceError);
  map = uniform_partition(2, 4, 2);  // wrong layer count
  EXPECT_THROW(gngr(trace, map, 2), TraceError);
  map = uniform_partition(1, 8, 2);  // wrong expert count
  EXPECT_THROW(gngr(trace, map, 2), TraceError);
  map.num_groups = 0;
  EXPECT_THROW(gngr(trace, map, 2), TraceError);
}

RoutingTrace symbol_trace(const GeneratorSpec& base) {
  GeneratorSpec spec = base;
  spec.symbol_alphabet = 8;
  return generate(spec);
}

TEST(MiBound, HoldsOnIndependentAndStickyFamilies) {
  GeneratorSpec uniform;
  uniform.kind = GeneratorKind::uniform;
  uniform.num_layers = 1;
  uniform.num_experts = 4;
  uniform.top_k = 1;
  uniform.num_samples = 10;
  uniform.tokens_per_sample = 500;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    uniform.seed = seed;
    const RoutingTrace trace = symbol_trace(uniform);
    for (int n = 1; n <= 3; ++n) {
      const MiBoundResult r = mi_bound_check(trace, n, 0);
      EXPECT_TRUE(r.holds) << "uniform seed=" << seed << " n=" << n;
      EXPECT_GE(r.mi_estimate, 0.0);
      EXPECT_GT(r.bound, 0.0);
    }
  }
  GeneratorSpec sticky;
  sticky.kind = GeneratorKind::sticky;
  sticky.num_layers = 2;
  sticky.num_experts = 6;
  sticky.top_k = 1;
  sticky.stay_prob = {0.8};
  sticky.num_samples = 10;
  sticky.tokens_per_sample = 500;
  for (std::uint64_t seed : {4ull, 5ull}) {
    sticky.seed = seed;
    const RoutingTrace trace = symbol_trace(sticky);
    for (int layer = 0; layer < 2; ++layer) {
      const MiBoundResult r = mi_bound_check(trace, 3, layer);
      EXPECT_TRUE(r.holds) << "sticky seed=" << seed << " layer=" << layer;
    }
  }
}

TEST(MiBound, ConstantRouterIsFarAboveTheBound) {
  RoutingTrace trace = make_path_trace(4, {0, 0, 0, 0, 0, 0});
  for (std::size_t i = 0; i < trace.tokens.size(); ++i)
    trace.tokens[i].input_symbol = static_cast<int>(i % 3);
  const MiBoundResult r = mi_bound_check(trace, 2, 0);
  EXPECT_DOUBLE_EQ(r.ngr, 1.0);
  EXPECT_NEAR(r.bound, 1.0 / 16.0, 1e-9);  // MI 0, E = 4, n = 2
  EXPECT_TRUE(r.holds);
}

TEST(MiBound, PreconditionsAreEnforced) {
  const auto expect_message = [](const RoutingTrace& t, int n, int layer,
                                 const std::string& message) {
    try {
      mi_bound_check(t, n, layer);
      FAIL() << "expected TraceError";
    } catch (const TraceError& e) {
      EXPECT_EQ(e.what(), message);
    }
  };

  RoutingTrace good = make_path_trace(4, {0, 1, 2, 3});
  for (auto& t : good.tokens) t.input_symbol = 1;
  EXPECT_NO_THROW(mi_bound_check(good, 2, 0));

  RoutingTrace wide_k = make_trace(1, 4, 2, {{{0, 1}}, {{2, 3}}});
  for (auto& t : wide_k.tokens) t.input_symbol = 1;
  expect_message(wide_k, 2, 0, "bound check requires small discrete instance");

  RoutingTrace big_e = make_path_trace(16, {0, 1});
  for (auto& t : big_e.tokens) t.input_symbol = 1;
  expect_message(big_e, 2, 0, "bound check requires small discrete instance");

  expect_message(good, 5, 0, "bound check requires small discrete instance");

  RoutingTrace no_symbols = make_path_trace(4, {0, 1, 2});
  expect_message(no_symbols, 2, 0,
                 "bound check requires small discrete instance");

  expect_message(good, 2, 1, "layer index out of range");
  expect_message(RoutingTrace{}, 2, 0, "empty trace");

  RoutingTrace tiny = make_path_trace(4, {0});
  tiny.tokens[0].input_symbol = 1;
  expect_message(tiny, 2, 0, "no windows");
}

}  // namespace
