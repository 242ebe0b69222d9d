#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "moescope/complexity.hpp"
#include "moescope/parallel.hpp"
#include "moescope/sequence_metrics.hpp"
#include "moescope/stats.hpp"
#include "moescope/token_metrics.hpp"
#include "moescope/trace.hpp"
#include "moescope/trace_io.hpp"

namespace moescope {

/// Options shared by the per-domain metric computations.
struct MetricOptions {
  std::vector<int> ngram{2, 5, 10, 20};
  int groups = 8;                        // inferred group count
  std::optional<GroupMap> group_map;     // overrides inference when present
  std::int64_t rss_iterations = 1000;
  std::uint64_t seed = 42;
  bool rss_sparse = false;
  std::int64_t max_tokens = 100000;
  LogBase log_base = LogBase::natural;
  ZeroRowPolicy zero_rows = ZeroRowPolicy::error;
  std::optional<bool> salient_filter;    // keep salient (true) / non-salient (false)
};

/// One domain's metric row. Metrics that could not be computed stay empty
/// and leave an explanation in `notes`.
struct DomainMetrics {
  std::string label;
  std::int64_t tokens = 0;
  std::int64_t samples = 0;
  std::optional<double> s_spec, s_spec_first, s_spec_mid, s_spec_last;
  std::optional<double> r_eff;
  std::optional<double> s_iso;
  std::optional<std::int64_t> rss_rows;
  std::optional<double> rss_signed_mean, rss_abs_mean, rss_per_draw_std,
      rss_analytic_std;
  std::vector<std::optional<double>> ngr_values;       // aligned with ngram
  std::vector<std::optional<double>> gngr_values;      // aligned with ngram
  std::vector<std::optional<double>> baseline_values;  // aligned with ngram
  std::optional<int> group_count;
  std::vector<double> s_spec_per_layer;
  std::vector<std::string> notes;
};

/// Full metrics report over one or more domains.
struct MetricReport {
  MetricOptions options;
  std::vector<DomainMetrics> domains;
};

namespace detail {

inline std::string fmt_value(double v) { return format_probability(v); }

inline std::string fmt_opt(const std::optional<double>& v,
                           const char* missing = "") {
  return v ? fmt_value(*v) : std::string(missing);
}

/// Pooled sign-sum input: every selected token contributes one row per
/// layer, with the same seeded token subsample at each layer. The row budget
/// `max_tokens` covers the pooled matrix, so each layer gets an equal share.
inline RssInput pooled_rss_input(const RoutingTrace& trace, std::uint64_t seed,
                                 bool sparse_mode, std::int64_t max_tokens) {
  const int L = trace.header.num_layers;
  const std::int64_t per_layer =
      std::max<std::int64_t>(1, max_tokens / std::max(L, 1));
  RssInput pooled;
  for (int l = 0; l < L; ++l) {
    RssInput layer = rss_input_from_trace(trace, l, seed, sparse_mode, per_layer);
    pooled.num_experts = layer.num_experts;
    pooled.num_rows += layer.num_rows;
    pooled.probs.insert(pooled.probs.end(), layer.probs.begin(),
                        layer.probs.end());
  }
  return pooled;
}

}  // namespace detail

/// Computes every per-domain metric (isolation is filled in later, once all
/// domains are known). `domain_index` seeds the domain's Monte Carlo stream.
inline DomainMetrics compute_domain_metrics(const std::string& label,
                                            const RoutingTrace& input_trace,
                                            const MetricOptions& options,
                                            std::size_t domain_index,
                                            RowProbabilities* rows_out = nullptr) {
  DomainMetrics out;
  out.label = label;

  RoutingTrace filtered;
  const RoutingTrace* trace = &input_trace;
  if (options.salient_filter) {
    filtered = filter_by_salience(input_trace, *options.salient_filter);
    trace = &filtered;
  }
  out.tokens = static_cast<std::int64_t>(trace->tokens.size());
  std::int64_t samples = 0;
  std::int64_t last_sample = -1;
  for (const TokenRecord& t : trace->tokens)
    if (t.sample_id != last_sample) {
      ++samples;
      last_sample = t.sample_id;
    }
  out.samples = samples;

  const ActivationMatrix counts = build_activation_matrix(*trace);
  const NormalizedMatrix scaled = normalize_matrix(counts, options.zero_rows);
  const RowProbabilities rows = row_probabilities(scaled);
  if (rows_out) *rows_out = rows;

  const SpecializationResult spec = routing_specialization(rows, options.log_base);
  out.s_spec = spec.aggregate;
  out.s_spec_per_layer = spec.per_layer;
  const int L = rows.num_layers;
  out.s_spec_first = spec.per_layer.front();
  out.s_spec_mid = spec.per_layer[static_cast<std::size_t>(L / 2)];
  out.s_spec_last = spec.per_layer.back();
  out.r_eff = effective_rank(rows);

  const std::uint64_t domain_seed =
      Rng::derive_stream(options.seed, static_cast<std::uint64_t>(domain_index));
  try {
    const RssInput pooled = detail::pooled_rss_input(
        *trace, domain_seed, options.rss_sparse, options.max_tokens);
    const RssResult r = rss(pooled, options.rss_iterations, domain_seed);
    out.rss_rows = static_cast<std::int64_t>(r.num_rows);
    out.rss_signed_mean = r.signed_mean;
    out.rss_abs_mean = r.abs_mean;
    out.rss_per_draw_std = r.per_draw_std;
    out.rss_analytic_std = r.analytic_std;
  } catch (const TraceError& e) {
    out.notes.push_back(label + ": rss skipped: " + e.what());
  }

  const auto profile = ngr_profile(*trace, options.ngram);
  for (const NgrResult& r : profile) {
    if (r.window_count > 0)
      out.ngr_values.emplace_back(r.aggregate);
    else {
      out.ngr_values.emplace_back(std::nullopt);
      out.notes.push_back(label + ": ngr n=" + std::to_string(r.n) +
                          ": no windows");
    }
  }
  for (int n : options.ngram)
    out.baseline_values.emplace_back(ngr_baseline_from_trace(counts, n));

  try {
    GroupMap map;
    if (options.group_map)
      map = *options.group_map;
    else
      map = infer_groups(*trace, options.groups);
    out.group_count = map.num_groups;
    const auto gprofile = gngr_profile(*trace, map, options.ngram);
    for (const NgrResult& r : gprofile) {
      if (r.window_count > 0)
        out.gngr_values.emplace_back(r.aggregate);
      else {
        out.gngr_values.emplace_back(std::nullopt);
        out.notes.push_back(label + ": gngr n=" + std::to_string(r.n) +
                            ": no windows");
      }
    }
  } catch (const TraceError& e) {
    out.gngr_values.assign(options.ngram.size(), std::nullopt);
    out.notes.push_back(label + ": groups skipped: " + e.what());
  }
  return out;
}

/// Builds the full report. Domains are computed concurrently up to
/// thread_cap(); results and isolation are deterministic regardless of the
/// thread count. Single-domain reports leave the isolation column empty.
inline MetricReport build_report(const std::vector<DomainTrace>& domains,
                                 const MetricOptions& options) {
  if (domains.empty()) throw std::invalid_argument("no traces");
  MetricReport report;
  report.options = options;
  report.domains.resize(domains.size());
  std::vector<RowProbabilities> rows(domains.size());

  detail::parallel_iterations(
      static_cast<std::int64_t>(domains.size()), [&](std::int64_t i) {
        const auto idx = static_cast<std::size_t>(i);
        report.domains[idx] =
            compute_domain_metrics(domains[idx].label, *domains[idx].trace,
                                   options, idx, &rows[idx]);
      });

  if (domains.size() >= 2) {
    std::map<std::string, RowProbabilities> by_label;
    for (std::size_t i = 0; i < domains.size(); ++i)
      by_label[domains[i].label] = rows[i];
    if (by_label.size() != domains.size())
      throw std::invalid_argument("duplicate domain label");
    const IsolationResult iso = domain_isolation(by_label);
    for (auto& d : report.domains)
      for (std::size_t i = 0; i < iso.labels.size(); ++i)
        if (iso.labels[i] == d.label) d.s_iso = iso.isolation[i];
  } else {
    report.domains.front().notes.push_back(
        report.domains.front().label +
        ": isolation skipped: need multiple domains");
  }
  return report;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  bool quote = false;
  for (char c : s)
    if (c == ',' || c == '"' || c == '\n') quote = true;
  if (!quote) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string options_comment(const MetricOptions& o) {
  std::string ngram;
  for (std::size_t i = 0; i < o.ngram.size(); ++i) {
    if (i) ngram += ',';
    ngram += std::to_string(o.ngram[i]);
  }
  std::string out = "# seed: " + std::to_string(o.seed) +
                    "; rss_iterations: " + std::to_string(o.rss_iterations) +
                    "; ngram: " + ngram + "; log_base: " +
                    (o.log_base == LogBase::natural ? "ln" : "log2");
  return out;
}

}  // namespace detail

/// CSV rendering with a versioned schema comment first, then run settings,
/// a header row, and one row per domain. Empty cells are unavailable
/// metrics, never zeros. The trailing accuracy column is left for
/// downstream correlation studies.
inline std::string report_csv(const MetricReport& report) {
  std::string out = "# schema: moescope-metrics v1\n";
  out += detail::options_comment(report.options) + "\n";
  out += "domain,tokens,samples,s_spec,s_spec_first,s_spec_mid,s_spec_last,"
         "r_eff,s_iso,rss_rows,rss_signed_mean,rss_abs_mean,rss_per_draw_std,"
         "rss_analytic_std";
  for (int n : report.options.ngram) out += ",ngr_" + std::to_string(n);
  for (int n : report.options.ngram) out += ",gngr_" + std::to_string(n);
  for (int n : report.options.ngram) out += ",ngr_baseline_" + std::to_string(n);
  out += ",group_count,accuracy\n";
  for (const DomainMetrics& d : report.domains) {
    out += detail::csv_field(d.label);
    out += ',' + std::to_string(d.tokens);
    out += ',' + std::to_string(d.samples);
    out += ',' + detail::fmt_opt(d.s_spec);
    out += ',' + detail::fmt_opt(d.s_spec_first);
    out += ',' + detail::fmt_opt(d.s_spec_mid);
    out += ',' + detail::fmt_opt(d.s_spec_last);
    out += ',' + detail::fmt_opt(d.r_eff);
    out += ',' + detail::fmt_opt(d.s_iso);
    out += ',';
    if (d.rss_rows) out += std::to_string(*d.rss_rows);
    out += ',' + detail::fmt_opt(d.rss_signed_mean);
    out += ',' + detail::fmt_opt(d.rss_abs_mean);
    out += ',' + detail::fmt_opt(d.rss_per_draw_std);
    out += ',' + detail::fmt_opt(d.rss_analytic_std);
    for (const auto& v : d.ngr_values) out += ',' + detail::fmt_opt(v);
    for (const auto& v : d.gngr_values) out += ',' + detail::fmt_opt(v);
    for (const auto& v : d.baseline_values) out += ',' + detail::fmt_opt(v);
    out += ',';
    if (d.group_count) out += std::to_string(*d.group_count);
    out += ",\n";  // accuracy column stays empty
  }
  return out;
}

/// Human-readable summary with the same content as the CSV.
inline std::string report_text(const MetricReport& report) {
  std::ostringstream out;
  out << "moescope metrics report\n";
  out << detail::options_comment(report.options).substr(2) << "\n";
  for (const DomainMetrics& d : report.domains) {
    out << "\ndomain " << d.label << " (" << d.tokens << " tokens, "
        << d.samples << " samples)\n";
    out << "  s_spec          " << detail::fmt_opt(d.s_spec, "-")
        << "  (first " << detail::fmt_opt(d.s_spec_first, "-") << ", mid "
        << detail::fmt_opt(d.s_spec_mid, "-") << ", last "
        << detail::fmt_opt(d.s_spec_last, "-") << ")\n";
    out << "  r_eff           " << detail::fmt_opt(d.r_eff, "-") << "\n";
    out << "  s_iso           " << detail::fmt_opt(d.s_iso, "-") << "\n";
    out << "  rss             signed_mean " << detail::fmt_opt(d.rss_signed_mean, "-")
        << ", abs_mean " << detail::fmt_opt(d.rss_abs_mean, "-")
        << ", per_draw_std " << detail::fmt_opt(d.rss_per_draw_std, "-")
        << ", analytic_std " << detail::fmt_opt(d.rss_analytic_std, "-");
    if (d.rss_rows) out << ", rows " << *d.rss_rows;
    out << "\n";
    for (std::size_t i = 0; i < report.options.ngram.size(); ++i) {
      out << "  n=" << report.options.ngram[i] << "  ngr "
          << detail::fmt_opt(d.ngr_values[i], "-") << ", gngr "
          << detail::fmt_opt(d.gngr_values[i], "-") << ", baseline "
          << detail::fmt_opt(d.baseline_values[i], "-") << "\n";
    }
    if (d.group_count) out << "  groups          " << *d.group_count << "\n";
    for (const std::string& note : d.notes) out << "  note: " << note << "\n";
  }
  return out.str();
}

}  // namespace moescope
