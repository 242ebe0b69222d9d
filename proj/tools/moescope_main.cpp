// moescope: analytics over mixture-of-experts routing traces.
//
// Subcommands: validate, synth, metrics, heatmaps, sweep, rss, groups.
// Exit codes: 0 success, 1 validation or domain errors, 2 I/O errors.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moescope/complexity.hpp"
#include "moescope/report.hpp"
#include "moescope/sequence_metrics.hpp"
#include "moescope/stats.hpp"
#include "moescope/synth.hpp"
#include "moescope/token_metrics.hpp"
#include "moescope/trace.hpp"
#include "moescope/trace_io.hpp"

namespace {

using namespace moescope;

std::vector<int> split_ints(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stoi(item));
  if (out.empty()) throw std::invalid_argument("empty integer list");
  return out;
}

std::vector<double> split_doubles(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stod(item));
  if (out.empty()) throw std::invalid_argument("empty number list");
  return out;
}

void require_readable(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw std::ios_base::failure("cannot open " + path.string());
}

std::string fmt(double v) { return detail::format_probability(v); }

// ---------------------------------------------------------------- validate

struct ValidateArgs {
  std::string path;
  bool lenient = false;
};

int run_validate(const ValidateArgs& args) {
  require_readable(args.path);
  const ValidationReport report = validate_file(args.path, args.lenient);
  std::cout << "tokens: " << report.token_count << "\n";
  std::cout << "samples: " << report.sample_count << "\n";
  std::cout << "issues: " << report.issues.size() << "\n";
  for (const ValidationIssue& issue : report.issues)
    std::cout << "  " << issue.message << "\n";
  if (!report.warnings.empty()) {
    std::cout << "warnings: " << report.warnings.size() << "\n";
    for (const ValidationIssue& w : report.warnings)
      std::cout << "  " << w.message << "\n";
  }
  std::cout << (report.ok ? "ok" : "invalid") << "\n";
  return report.ok ? 0 : 1;
}

// ------------------------------------------------------------------- synth

struct SynthArgs {
  std::string kind;
  int layers = 2;
  int experts = 8;
  int topk = 1;
  std::int64_t samples = 10;
  std::int64_t tokens = 100;
  std::uint64_t seed = 42;
  std::string model_id = "synthetic";
  double alpha = 1.0;
  std::string stay_prob = "0.9";
  int num_groups = 0;
  std::string groupmap_path;
  std::string within_switch = "1.0";
  std::string group_switch = "0.0";
  int symbols = 0;
  double salient_prob = -1.0;
  bool no_dense = false;
  bool emit_gate = false;
  std::string out;
};

int run_synth(const SynthArgs& args) {
  GeneratorSpec spec;
  if (args.kind == "uniform") spec.kind = GeneratorKind::uniform;
  else if (args.kind == "dirichlet" || args.kind == "dirichlet_specialist")
    spec.kind = GeneratorKind::dirichlet_specialist;
  else if (args.kind == "sticky") spec.kind = GeneratorKind::sticky;
  else if (args.kind == "grouped_jitter") spec.kind = GeneratorKind::grouped_jitter;
  else throw std::invalid_argument("unknown generator kind '" + args.kind + "'");
  spec.num_layers = args.layers;
  spec.num_experts = args.experts;
  spec.top_k = args.topk;
  spec.num_samples = args.samples;
  spec.tokens_per_sample = args.tokens;
  spec.seed = args.seed;
  spec.model_id = args.model_id;
  spec.alpha = args.alpha;
  spec.stay_prob = split_doubles(args.stay_prob);
  spec.within_group_switch_prob = split_doubles(args.within_switch);
  spec.group_switch_prob = split_doubles(args.group_switch);
  spec.emit_dense = !args.no_dense;
  spec.emit_gate = args.emit_gate;
  if (args.symbols > 0) spec.symbol_alphabet = args.symbols;
  if (args.salient_prob >= 0.0) spec.salient_prob = args.salient_prob;
  if (spec.kind == GeneratorKind::grouped_jitter) {
    if (!args.groupmap_path.empty()) {
      require_readable(args.groupmap_path);
      spec.group_map = load_group_map(args.groupmap_path);
    } else if (args.num_groups > 0) {
      spec.group_map =
          uniform_partition(args.layers, args.experts, args.num_groups);
    } else {
      throw std::invalid_argument(
          "grouped_jitter needs --num-groups or --groupmap");
    }
    spec.group_map.layers.resize(static_cast<std::size_t>(args.layers),
                                 spec.group_map.layers.front());
  }
  const RoutingTrace trace = generate(spec);
  write_trace_file(trace, args.out);
  std::cout << "seed: " << spec.seed << "\n";
  std::cout << "tokens: " << trace.tokens.size() << "\n";
  std::cout << "wrote: " << args.out << "\n";
  return 0;
}

// ----------------------------------------------------------------- metrics

struct MetricsArgs {
  std::vector<std::string> paths;
  std::vector<std::string> labels;
  std::string ngram = "2,5,10,20";
  int groups = 8;
  std::string groupmap_path;
  std::int64_t rss_iterations = 1000;
  std::uint64_t seed = 42;
  bool rss_sparse = false;
  std::int64_t max_tokens = 100000;
  bool log2 = false;
  bool lenient = false;
  std::string salient;  // "", "keep", "drop"
  std::string zero_rows = "error";
  std::string out = "metrics_report";
};

std::vector<RoutingTrace> load_domains(const std::vector<std::string>& paths,
                                       const std::vector<std::string>& labels,
                                       bool lenient) {
  if (paths.empty()) throw std::invalid_argument("no trace paths given");
  if (labels.size() != paths.size())
    throw std::invalid_argument("each trace needs a --domain label");
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = i + 1; j < labels.size(); ++j)
      if (labels[i] == labels[j])
        throw std::invalid_argument("duplicate domain label '" + labels[i] + "'");
  std::vector<RoutingTrace> traces;
  traces.reserve(paths.size());
  for (const std::string& path : paths) {
    require_readable(path);
    traces.push_back(parse_trace_file(path, ParseOptions{lenient}));
  }
  return traces;
}

int run_metrics(const MetricsArgs& args) {
  MetricOptions options;
  options.ngram = split_ints(args.ngram);
  for (int n : options.ngram)
    if (n < 1) throw std::invalid_argument("ngram lengths must be positive");
  options.groups = args.groups;
  if (!args.groupmap_path.empty()) {
    require_readable(args.groupmap_path);
    options.group_map = load_group_map(args.groupmap_path);
  }
  options.rss_iterations = args.rss_iterations;
  options.seed = args.seed;
  options.rss_sparse = args.rss_sparse;
  options.max_tokens = args.max_tokens;
  options.log_base = args.log2 ? LogBase::two : LogBase::natural;
  if (args.zero_rows == "uniform") options.zero_rows = ZeroRowPolicy::uniform;
  else if (args.zero_rows != "error")
    throw std::invalid_argument("--zero-rows takes error or uniform");
  if (args.salient == "keep") options.salient_filter = true;
  else if (args.salient == "drop") options.salient_filter = false;
  else if (!args.salient.empty())
    throw std::invalid_argument("--salient takes keep or drop");

  const std::vector<RoutingTrace> traces =
      load_domains(args.paths, args.labels, args.lenient);
  std::vector<DomainTrace> domains;
  for (std::size_t i = 0; i < traces.size(); ++i)
    domains.push_back({args.labels[i], &traces[i]});

  const MetricReport report = build_report(domains, options);
  write_file_atomic(args.out + ".csv", report_csv(report));
  write_file_atomic(args.out + ".txt", report_text(report));
  std::cout << "seed: " << options.seed << "\n";
  std::cout << "wrote: " << args.out << ".csv\n";
  std::cout << "wrote: " << args.out << ".txt\n";
  for (const DomainMetrics& d : report.domains)
    for (const std::string& note : d.notes) std::cerr << "note: " << note << "\n";
  return 0;
}

// ---------------------------------------------------------------- heatmaps

struct HeatmapArgs {
  std::vector<std::string> paths;
  std::vector<std::string> labels;
  std::string layers;  // comma list, optional
  bool lenient = false;
  std::string out_dir = ".";
};

int run_heatmaps(const HeatmapArgs& args) {
  const std::vector<RoutingTrace> traces =
      load_domains(args.paths, args.labels, args.lenient);
  std::filesystem::create_directories(args.out_dir);
  std::map<std::string, RowProbabilities> rows_by_label;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const NormalizedMatrix scaled =
        normalize_matrix(build_activation_matrix(traces[i]));
    std::string csv = "# schema: moescope-heatmap v1\n";
    csv += "layer";
    for (int e = 0; e < scaled.num_experts; ++e)
      csv += ",expert_" + std::to_string(e);
    csv += "\n";
    for (int l = 0; l < scaled.num_layers; ++l) {
      csv += std::to_string(l);
      for (int e = 0; e < scaled.num_experts; ++e)
        csv += ',' + fmt(scaled.at(l, e));
      csv += "\n";
    }
    const std::filesystem::path path =
        std::filesystem::path(args.out_dir) /
        ("activation_" + args.labels[i] + ".csv");
    write_file_atomic(path, csv);
    std::cout << "wrote: " << path.string() << "\n";
    rows_by_label[args.labels[i]] = row_probabilities(scaled);
  }

  auto write_similarity = [&](const IsolationResult& iso,
                              const std::filesystem::path& path,
                              std::optional<int> layer) {
    std::string csv = "# schema: moescope-similarity v1\n";
    if (layer) csv += "# layer: " + std::to_string(*layer) + "\n";
    csv += "domain";
    for (const std::string& label : iso.labels) csv += ',' + label;
    csv += "\n";
    for (std::size_t a = 0; a < iso.labels.size(); ++a) {
      csv += iso.labels[a];
      for (std::size_t b = 0; b < iso.labels.size(); ++b)
        csv += ',' + fmt(iso.sim(a, b));
      csv += "\n";
    }
    write_file_atomic(path, csv);
    std::cout << "wrote: " << path.string() << "\n";
  };

  if (traces.size() >= 2) {
    write_similarity(domain_isolation(rows_by_label),
                     std::filesystem::path(args.out_dir) / "similarity.csv",
                     std::nullopt);
    if (!args.layers.empty())
      for (int layer : split_ints(args.layers))
        write_similarity(
            per_layer_similarity(rows_by_label, layer),
            std::filesystem::path(args.out_dir) /
                ("similarity_layer" + std::to_string(layer) + ".csv"),
            layer);
  } else {
    std::cerr << "note: similarity matrices need multiple domains\n";
  }
  return 0;
}

// ------------------------------------------------------------------- sweep

struct SweepArgs {
  std::vector<std::string> paths;
  std::vector<std::string> labels;
  std::string mode;
  std::string values;
  int ngram_n = 5;
  int num_groups = 0;
  std::string groupmap_path;
  bool lenient = false;
  std::string out;
};

int run_sweep(const SweepArgs& args) {
  const std::vector<RoutingTrace> traces =
      load_domains(args.paths, args.labels, args.lenient);
  std::vector<DomainTrace> domains;
  for (std::size_t i = 0; i < traces.size(); ++i)
    domains.push_back({args.labels[i], &traces[i]});
  const std::vector<int> values = split_ints(args.values);

  SweepResult result;
  if (args.mode == "n") {
    std::optional<GroupMap> map;
    if (!args.groupmap_path.empty()) {
      require_readable(args.groupmap_path);
      map = load_group_map(args.groupmap_path);
    } else if (args.num_groups > 0) {
      map = infer_groups(traces.front(), args.num_groups);
    }
    result = sweep_n(domains, values, map ? &*map : nullptr);
  } else if (args.mode == "groups") {
    result = sweep_groups(domains, values, args.ngram_n);
  } else {
    throw std::invalid_argument("--mode takes n or groups");
  }

  std::string matrix_csv = "# schema: moescope-sweep v1\n";
  matrix_csv += "# mode: " + args.mode + "\n";
  matrix_csv += "row";
  for (double v : result.values)
    matrix_csv += ',' + std::to_string(static_cast<int>(v));
  matrix_csv += "\n";
  for (std::size_t r = 0; r < result.rows.size(); ++r) {
    matrix_csv += result.rows[r];
    for (std::size_t c = 0; c < result.values.size(); ++c) {
      const double v = result.at(r, c);
      matrix_csv += ',';
      if (std::isfinite(v)) matrix_csv += fmt(v);
    }
    matrix_csv += "\n";
  }
  write_file_atomic(args.out + "_matrix.csv", matrix_csv);

  std::string rho_csv = "# schema: moescope-sweep-spearman v1\n";
  rho_csv += "value";
  for (double v : result.values)
    rho_csv += ',' + std::to_string(static_cast<int>(v));
  rho_csv += "\n";
  for (std::size_t a = 0; a < result.values.size(); ++a) {
    rho_csv += std::to_string(static_cast<int>(result.values[a]));
    for (std::size_t b = 0; b < result.values.size(); ++b) {
      const double v = result.rho(a, b);
      rho_csv += ',';
      if (std::isfinite(v)) rho_csv += fmt(v);
    }
    rho_csv += "\n";
  }
  write_file_atomic(args.out + "_spearman.csv", rho_csv);

  std::cout << "wrote: " << args.out << "_matrix.csv\n";
  std::cout << "wrote: " << args.out << "_spearman.csv\n";
  try {
    std::cout << "mean_pairwise_spearman: " << fmt(result.mean_pairwise_spearman())
              << "\n";
  } catch (const TraceError&) {
    std::cout << "mean_pairwise_spearman: undefined\n";
  }
  return 0;
}

// --------------------------------------------------------------------- rss

struct RssArgs {
  std::string path;
  std::string layer = "all";
  std::int64_t iterations = 1000;
  std::uint64_t seed = 42;
  bool sparse = false;
  std::int64_t max_tokens = 100000;
  bool lenient = false;
};

int run_rss(const RssArgs& args) {
  require_readable(args.path);
  const RoutingTrace trace = parse_trace_file(args.path, ParseOptions{args.lenient});
  std::cout << "seed: " << args.seed << "\n";
  auto print_layer = [](int layer, const RssResult& result) {
    std::cout << "layer: " << layer << "\n";
    std::cout << "  rows: " << result.num_rows << "\n";
    std::cout << "  iterations: " << result.iterations << "\n";
    std::cout << "  sparse: " << (result.sparse ? "true" : "false") << "\n";
    std::cout << "  signed_mean: " << fmt(result.signed_mean) << "\n";
    std::cout << "  abs_mean: " << fmt(result.abs_mean) << "\n";
    std::cout << "  per_draw_std: " << fmt(result.per_draw_std) << "\n";
    std::cout << "  analytic_std: " << fmt(result.analytic_std) << "\n";
  };
  if (args.layer == "all") {
    for (int l = 0; l < trace.header.num_layers; ++l)
      print_layer(l, rss_from_trace(trace, l, args.iterations, args.seed,
                                    args.sparse, args.max_tokens));
  } else {
    const int layer = std::stoi(args.layer);
    print_layer(layer, rss_from_trace(trace, layer, args.iterations, args.seed,
                                      args.sparse, args.max_tokens));
  }
  return 0;
}

// ------------------------------------------------------------------ groups

struct GroupsArgs {
  std::string path;
  int groups = 8;
  bool lenient = false;
  std::string out;
};

int run_groups(const GroupsArgs& args) {
  require_readable(args.path);
  const RoutingTrace trace = parse_trace_file(args.path, ParseOptions{args.lenient});
  const GroupMap map = infer_groups(trace, args.groups);
  save_group_map(map, args.out);
  std::cout << "groups: " << map.num_groups << "\n";
  std::cout << "wrote: " << args.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Analytics over mixture-of-experts routing traces"};
  app.require_subcommand(1);

  ValidateArgs validate_args;
  CLI::App* validate_cmd =
      app.add_subcommand("validate", "Check a trace file and report issues");
  validate_cmd->add_option("trace", validate_args.path, "Trace file")->required();
  validate_cmd->add_flag("--lenient", validate_args.lenient,
                         "Downgrade unknown keys to warnings");

  SynthArgs synth_args;
  CLI::App* synth_cmd =
      app.add_subcommand("synth", "Generate a synthetic routing trace");
  synth_cmd->add_option("--kind", synth_args.kind,
                        "uniform|dirichlet|sticky|grouped_jitter")->required();
  synth_cmd->add_option("--layers", synth_args.layers, "Layer count");
  synth_cmd->add_option("--experts", synth_args.experts, "Expert count");
  synth_cmd->add_option("--topk", synth_args.topk, "Experts per token");
  synth_cmd->add_option("--samples", synth_args.samples, "Sample count");
  synth_cmd->add_option("--tokens", synth_args.tokens, "Tokens per sample");
  synth_cmd->add_option("--seed", synth_args.seed, "RNG seed");
  synth_cmd->add_option("--model-id", synth_args.model_id, "Header model id");
  synth_cmd->add_option("--alpha", synth_args.alpha,
                        "Dirichlet concentration (dirichlet kind)");
  synth_cmd->add_option("--stay-prob", synth_args.stay_prob,
                        "Sticky stay probability, scalar or per-layer list");
  synth_cmd->add_option("--num-groups", synth_args.num_groups,
                        "Contiguous equal partition (grouped_jitter)");
  synth_cmd->add_option("--groupmap", synth_args.groupmap_path,
                        "Group map file (grouped_jitter)");
  synth_cmd->add_option("--within-switch-prob", synth_args.within_switch,
                        "Within-group redraw probability, scalar or per-layer");
  synth_cmd->add_option("--group-switch-prob", synth_args.group_switch,
                        "Group redraw probability, scalar or per-layer");
  synth_cmd->add_option("--symbols", synth_args.symbols,
                        "Emit input symbols from an alphabet of this size");
  synth_cmd->add_option("--salient-prob", synth_args.salient_prob,
                        "Emit salience flags with this probability");
  synth_cmd->add_flag("--no-dense", synth_args.no_dense,
                      "Skip dense_probs emission");
  synth_cmd->add_flag("--emit-gate", synth_args.emit_gate,
                      "Emit gate_probs for selected experts");
  synth_cmd->add_option("--out", synth_args.out, "Output trace path")->required();

  MetricsArgs metrics_args;
  CLI::App* metrics_cmd =
      app.add_subcommand("metrics", "Compute the metric report for domains");
  metrics_cmd->add_option("traces", metrics_args.paths, "Trace files")->required();
  metrics_cmd->add_option("--domain", metrics_args.labels,
                          "Domain label per trace, in order")->required();
  metrics_cmd->add_option("--ngram", metrics_args.ngram,
                          "Window lengths (comma list)");
  metrics_cmd->add_option("--groups", metrics_args.groups,
                          "Inferred group count");
  metrics_cmd->add_option("--groupmap", metrics_args.groupmap_path,
                          "Group map file (overrides inference)");
  metrics_cmd->add_option("--rss-iterations", metrics_args.rss_iterations,
                          "Sign-sum Monte Carlo iterations");
  metrics_cmd->add_option("--seed", metrics_args.seed, "RNG seed");
  metrics_cmd->add_flag("--rss-sparse", metrics_args.rss_sparse,
                        "Use renormalized gate probabilities");
  metrics_cmd->add_option("--max-tokens", metrics_args.max_tokens,
                          "Token cap per domain (seeded subsample)");
  metrics_cmd->add_flag("--log2", metrics_args.log2,
                        "Report specialization in bits");
  metrics_cmd->add_flag("--lenient", metrics_args.lenient,
                        "Tolerate unknown keys in inputs");
  metrics_cmd->add_option("--salient", metrics_args.salient,
                          "keep|drop tokens by salience flag");
  metrics_cmd->add_option("--zero-rows", metrics_args.zero_rows,
                          "error|uniform for unobserved layers");
  metrics_cmd->add_option("--out", metrics_args.out,
                          "Output prefix (.csv and .txt)");

  HeatmapArgs heatmap_args;
  CLI::App* heatmap_cmd =
      app.add_subcommand("heatmaps", "Export activation and similarity matrices");
  heatmap_cmd->add_option("traces", heatmap_args.paths, "Trace files")->required();
  heatmap_cmd->add_option("--domain", heatmap_args.labels,
                          "Domain label per trace, in order")->required();
  heatmap_cmd->add_option("--layer", heatmap_args.layers,
                          "Layers for per-layer similarity (comma list)");
  heatmap_cmd->add_flag("--lenient", heatmap_args.lenient,
                        "Tolerate unknown keys in inputs");
  heatmap_cmd->add_option("--out", heatmap_args.out_dir, "Output directory");

  SweepArgs sweep_args;
  CLI::App* sweep_cmd =
      app.add_subcommand("sweep", "Robustness sweep over n or group counts");
  sweep_cmd->add_option("traces", sweep_args.paths, "Trace files")->required();
  sweep_cmd->add_option("--domain", sweep_args.labels,
                        "Domain label per trace, in order")->required();
  sweep_cmd->add_option("--mode", sweep_args.mode, "n|groups")->required();
  sweep_cmd->add_option("--values", sweep_args.values,
                        "Parameter values (comma list)")->required();
  sweep_cmd->add_option("--ngram-n", sweep_args.ngram_n,
                        "Window length for groups mode");
  sweep_cmd->add_option("--num-groups", sweep_args.num_groups,
                        "Inferred groups for G-NGR rows in n mode");
  sweep_cmd->add_option("--groupmap", sweep_args.groupmap_path,
                        "Group map file for G-NGR rows in n mode");
  sweep_cmd->add_flag("--lenient", sweep_args.lenient,
                      "Tolerate unknown keys in inputs");
  sweep_cmd->add_option("--out", sweep_args.out, "Output prefix")->required();

  RssArgs rss_args;
  CLI::App* rss_cmd =
      app.add_subcommand("rss", "Sign-sum complexity statistics for a trace");
  rss_cmd->add_option("trace", rss_args.path, "Trace file")->required();
  rss_cmd->add_option("--layer", rss_args.layer, "Layer index or 'all'");
  rss_cmd->add_option("--iterations", rss_args.iterations,
                      "Monte Carlo iterations");
  rss_cmd->add_option("--seed", rss_args.seed, "RNG seed");
  rss_cmd->add_flag("--sparse", rss_args.sparse,
                    "Use renormalized gate probabilities");
  rss_cmd->add_option("--max-tokens", rss_args.max_tokens,
                      "Token cap (seeded subsample)");
  rss_cmd->add_flag("--lenient", rss_args.lenient,
                    "Tolerate unknown keys in inputs");

  GroupsArgs groups_args;
  CLI::App* groups_cmd =
      app.add_subcommand("groups", "Infer an expert grouping from co-activation");
  groups_cmd->add_option("trace", groups_args.path, "Trace file")->required();
  groups_cmd->add_option("--groups", groups_args.groups, "Group count")->required();
  groups_cmd->add_flag("--lenient", groups_args.lenient,
                       "Tolerate unknown keys in inputs");
  groups_cmd->add_option("--out", groups_args.out, "Group map output path")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*validate_cmd) return run_validate(validate_args);
    if (*synth_cmd) return run_synth(synth_args);
    if (*metrics_cmd) return run_metrics(metrics_args);
    if (*heatmap_cmd) return run_heatmaps(heatmap_args);
    if (*sweep_cmd) return run_sweep(sweep_args);
    if (*rss_cmd) return run_rss(rss_args);
    if (*groups_cmd) return run_groups(groups_args);
  } catch (const std::ios_base::failure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
