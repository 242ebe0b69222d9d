#include "moescope/trace.hpp"

#include <cmath>
#include <optional>
#include <vector>

#include <gtest/gtest.h>

#include "moescope/rng.hpp"
#include "test_util.hpp"

namespace {

using namespace moescope;

TEST(ActivationMatrix, CountsHandExample) {
  // Two layers, four experts, k = 2, three tokens.
  const RoutingTrace trace = test_util::make_trace(
      2, 4, 2,
      {{{0, 1}, {2, 3}}, {{0, 2}, {2, 3}}, {{1, 3}, {0, 2}}});
  const ActivationMatrix counts = build_activation_matrix(trace);
  EXPECT_EQ(counts.num_layers, 2);
  EXPECT_EQ(counts.num_experts, 4);
  EXPECT_EQ(counts.top_k, 2);
  EXPECT_EQ(counts.token_count, 3);
  EXPECT_EQ(counts.at(0, 0), 2);
  EXPECT_EQ(counts.at(0, 1), 2);
  EXPECT_EQ(counts.at(0, 2), 1);
  EXPECT_EQ(counts.at(0, 3), 1);
  EXPECT_EQ(counts.at(1, 0), 1);
  EXPECT_EQ(counts.at(1, 1), 0);
  EXPECT_EQ(counts.at(1, 2), 3);
  EXPECT_EQ(counts.at(1, 3), 2);
}

TEST(ActivationMatrix, LayerFilter) {
  const RoutingTrace trace = test_util::make_trace(
      2, 4, 1, {{{0}, {3}}, {{1}, {3}}});
  const ActivationMatrix counts = build_activation_matrix(trace, 1);
  EXPECT_EQ(counts.num_layers, 1);
  EXPECT_EQ(counts.at(0, 3), 2);
  EXPECT_EQ(counts.at(0, 0), 0);
  EXPECT_THROW(
      {
        try {
          build_activation_matrix(trace, 2);
        } catch (const TraceError& e) {
          EXPECT_STREQ(e.what(), "layer index out of range");
          throw;
        }
      },
      TraceError);
}

TEST(ActivationMatrix, Errors) {
  RoutingTrace empty;
  empty.header = test_util::make_header(1, 4, 1);
  EXPECT_THROW(
      {
        try {
          build_activation_matrix(empty);
        } catch (const TraceError& e) {
          EXPECT_STREQ(e.what(), "empty trace");
          throw;
        }
      },
      TraceError);

  // Wrong layer count in one token.
  RoutingTrace bad_layers = test_util::make_trace(2, 4, 1, {{{0}, {1}}});
  bad_layers.tokens.push_back(test_util::make_token(0, 1, {{0}}));
  EXPECT_THROW(build_activation_matrix(bad_layers), TraceError);

  // Expert index out of range.
  RoutingTrace bad_expert = test_util::make_trace(1, 4, 1, {{{4}}});
  EXPECT_THROW(build_activation_matrix(bad_expert), TraceError);

  // Wrong top-k arity.
  RoutingTrace bad_arity = test_util::make_trace(1, 4, 2, {{{0}}});
  EXPECT_THROW(build_activation_matrix(bad_arity), TraceError);
}

TEST(NormalizedMatrix, RowSumsAndCancellation) {
  Rng rng(2024);
  for (int round = 0; round < 20; ++round) {
    const int L = 1 + static_cast<int>(rng.index(6));
    const int E = 2 + static_cast<int>(rng.index(15));
    const int k = 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(E)));
    ActivationMatrix counts;
    counts.num_layers = L;
    counts.num_experts = E;
    counts.top_k = k;
    counts.token_count = 1000;
    counts.counts.resize(static_cast<std::size_t>(L) * E);
    for (auto& c : counts.counts)
      c = 1 + static_cast<std::int64_t>(rng.index(500));

    const NormalizedMatrix scaled = normalize_matrix(counts);
    for (int l = 0; l < L; ++l) {
      double row = 0.0;
      for (int e = 0; e < E; ++e) row += scaled.at(l, e);
      EXPECT_NEAR(row, static_cast<double>(E) / k, 1e-9);
    }

    // The rescaling factor cancels in the row distribution: the result is
    // the direct row normalization of the raw counts.
    const RowProbabilities probs = row_probabilities(scaled);
    for (int l = 0; l < L; ++l) {
      std::int64_t row_sum = 0;
      for (int e = 0; e < E; ++e) row_sum += counts.at(l, e);
      for (int e = 0; e < E; ++e) {
        const double direct = static_cast<double>(counts.at(l, e)) /
                              static_cast<double>(row_sum);
        EXPECT_NEAR(probs.at(l, e), direct, 1e-12);
      }
    }
  }
}

TEST(NormalizedMatrix, ZeroRowPolicy) {
  ActivationMatrix counts;
  counts.num_layers = 2;
  counts.num_experts = 4;
  counts.top_k = 2;
  counts.token_count = 5;
  counts.counts = {3, 1, 4, 2, 0, 0, 0, 0};
  EXPECT_THROW(
      {
        try {
          normalize_matrix(counts);
        } catch (const TraceError& e) {
          EXPECT_STREQ(e.what(), "unobserved layer");
          throw;
        }
      },
      TraceError);
  const NormalizedMatrix scaled = normalize_matrix(counts, ZeroRowPolicy::uniform);
  // The uniform fill keeps the row-sum contract: E/k = 4/2 = 2 over 4 cells.
  for (int e = 0; e < 4; ++e) EXPECT_DOUBLE_EQ(scaled.at(1, e), 0.5);
  const RowProbabilities probs = row_probabilities(scaled);
  for (int e = 0; e < 4; ++e) EXPECT_DOUBLE_EQ(probs.at(1, e), 0.25);
}

TEST(SalienceFilter, SplitsAndReindexes) {
  RoutingTrace trace = test_util::make_path_trace(4, {0, 1, 2, 3});
  test_util::append_path(trace, 1, {3, 2});
  const std::vector<bool> flags{true, false, true, true, false, true};
  for (std::size_t i = 0; i < trace.tokens.size(); ++i)
    trace.tokens[i].salient = flags[i];

  const RoutingTrace kept = filter_by_salience(trace, true);
  ASSERT_EQ(kept.tokens.size(), 4u);
  EXPECT_EQ(kept.tokens[0].layers[0].experts[0], 0);
  EXPECT_EQ(kept.tokens[1].layers[0].experts[0], 2);
  EXPECT_EQ(kept.tokens[2].layers[0].experts[0], 3);
  EXPECT_EQ(kept.tokens[3].layers[0].experts[0], 2);
  // Token indices are contiguous again per sample.
  EXPECT_EQ(kept.tokens[0].token_index, 0);
  EXPECT_EQ(kept.tokens[1].token_index, 1);
  EXPECT_EQ(kept.tokens[2].token_index, 2);
  EXPECT_EQ(kept.tokens[3].sample_id, 1);
  EXPECT_EQ(kept.tokens[3].token_index, 0);

  const RoutingTrace dropped = filter_by_salience(trace, false);
  ASSERT_EQ(dropped.tokens.size(), 2u);
  EXPECT_EQ(dropped.tokens[0].layers[0].experts[0], 1);
  EXPECT_EQ(dropped.tokens[1].layers[0].experts[0], 3);

  trace.tokens[2].salient.reset();
  EXPECT_THROW(
      {
        try {
          filter_by_salience(trace, true);
        } catch (const TraceError& e) {
          EXPECT_STREQ(e.what(), "salience mask absent");
          throw;
        }
      },
      TraceError);
}

}  // namespace
