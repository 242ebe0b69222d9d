#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "moescope/trace.hpp"

namespace moescope {

/**
 * Trace file format (.moetrace.jsonl): JSON Lines, one object per line.
 *
 * Line 1 is the header:
 *   {"format_version":1,"model_id":...,"num_layers":L,"num_experts":E,
 *    "top_k":k,"group_count":g?}
 *
 * Every following line is one token:
 *   {"sample_id":s,"token_index":t,"salient":b?,"input_symbol":x?,
 *    "layers":[{"experts":[...k ints...],"gate_probs":[...k...]?,
 *               "dense_probs":[...E...]?}, ... L entries ...]}
 *
 * Canonical form, produced by write_trace: keys in exactly the order shown,
 * optional keys omitted when absent, no whitespace, expert indices ascending
 * (gate_probs aligned), probabilities rendered with 9 significant digits
 * ("%.9g"), every line newline-terminated. Tokens are grouped by sample in
 * file order; token_index runs 0,1,2,... within each sample.
 *
 * "input_symbol" is a documented extension emitted by the synthetic
 * generators for small discrete instances; all analytics except the mutual
 * information bound check ignore it.
 */

namespace detail {

/// Shortest-ish deterministic rendering at 9 significant digits.
inline std::string format_probability(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline std::string json_quote(const std::string& s) {
  return nlohmann::json(s).dump();
}

}  // namespace detail

/// One problem found while validating a trace file.
struct ValidationIssue {
  std::int64_t line = 0;
  std::string code;
  std::string message;

  bool operator==(const ValidationIssue&) const = default;
};

/// Outcome of validate(): counts plus all collected issues and warnings.
struct ValidationReport {
  bool ok = false;
  std::int64_t token_count = 0;
  std::int64_t sample_count = 0;
  std::vector<ValidationIssue> issues;
  std::vector<ValidationIssue> warnings;
};

struct ParseOptions {
  /// Lenient mode ignores unknown keys instead of rejecting the record.
  bool lenient = false;
};

namespace detail {

struct LineContext {
  std::int64_t line;
  bool lenient;
  std::vector<ValidationIssue>* warnings;  // may be null
};

[[noreturn]] inline void fail(const LineContext& ctx, const std::string& code,
                              const std::string& text) {
  (void)code;
  throw TraceError(text + " (line " + std::to_string(ctx.line) + ")", ctx.line);
}

inline void check_known_keys(const nlohmann::json& obj,
                             const std::vector<std::string>& known,
                             const LineContext& ctx) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool found = false;
    for (const auto& k : known)
      if (it.key() == k) {
        found = true;
        break;
      }
    if (!found) {
      if (ctx.lenient) {
        if (ctx.warnings)
          ctx.warnings->push_back({ctx.line, "unknown_key",
                                   "unknown key '" + it.key() + "' (line " +
                                       std::to_string(ctx.line) + ")"});
      } else {
        fail(ctx, "unknown_key", "unknown key '" + it.key() + "'");
      }
    }
  }
}

inline TraceHeader parse_header_line(const std::string& line,
                                     const LineContext& ctx) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    throw TraceError("bad header", 1);
  }
  if (!j.is_object()) throw TraceError("bad header", 1);
  check_known_keys(j,
                   {"format_version", "model_id", "num_layers", "num_experts",
                    "top_k", "group_count"},
                   ctx);
  TraceHeader h;
  try {
    h.format_version = j.at("format_version").get<int>();
    h.model_id = j.at("model_id").get<std::string>();
    h.num_layers = j.at("num_layers").get<int>();
    h.num_experts = j.at("num_experts").get<int>();
    h.top_k = j.at("top_k").get<int>();
    if (j.contains("group_count")) h.group_count = j.at("group_count").get<int>();
  } catch (const nlohmann::json::exception&) {
    throw TraceError("bad header", 1);
  }
  if (h.format_version != 1) throw TraceError("bad header", 1);
  if (h.num_layers < 1 || h.num_experts < 2) throw TraceError("bad header", 1);
  if (h.top_k < 1 || h.top_k > h.num_experts) throw TraceError("bad header", 1);
  if (h.group_count && (*h.group_count < 1 || *h.group_count > h.num_experts))
    throw TraceError("bad header", 1);
  return h;
}

inline LayerRouting parse_layer_object(const nlohmann::json& j,
                                       const TraceHeader& header,
                                       const LineContext& ctx) {
  if (!j.is_object()) fail(ctx, "malformed", "malformed record");
  check_known_keys(j, {"experts", "gate_probs", "dense_probs"}, ctx);
  LayerRouting lr;
  const auto it = j.find("experts");
  if (it == j.end() || !it->is_array())
    fail(ctx, "malformed", "malformed record");
  if (static_cast<int>(it->size()) != header.top_k)
    fail(ctx, "expert_set_size", "expert set size mismatch");
  for (const auto& v : *it) {
    if (!v.is_number_integer()) fail(ctx, "malformed", "malformed record");
    int e = v.get<int>();
    if (e < 0 || e >= header.num_experts)
      fail(ctx, "expert_out_of_range", "expert out of range");
    lr.experts.push_back(e);
  }
  std::vector<int> order(lr.experts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return lr.experts[static_cast<std::size_t>(a)] <
                                       lr.experts[static_cast<std::size_t>(b)]; });
  for (std::size_t i = 1; i < lr.experts.size(); ++i)
    if (lr.experts[static_cast<std::size_t>(order[i])] ==
        lr.experts[static_cast<std::size_t>(order[i - 1])])
      fail(ctx, "duplicate_expert", "duplicate expert");

  if (j.contains("gate_probs")) {
    const auto& g = j.at("gate_probs");
    if (!g.is_array()) fail(ctx, "malformed", "malformed record");
    if (static_cast<int>(g.size()) != header.top_k)
      fail(ctx, "gate_size", "gate size mismatch");
    std::vector<double> gate;
    for (const auto& v : g) {
      if (!v.is_number()) fail(ctx, "malformed", "malformed record");
      double p = v.get<double>();
      if (!std::isfinite(p) || p < 0.0)
        fail(ctx, "negative_probability", "negative probability");
      gate.push_back(p);
    }
    lr.gate_probs = std::move(gate);
  }
  if (j.contains("dense_probs")) {
    const auto& d = j.at("dense_probs");
    if (!d.is_array()) fail(ctx, "malformed", "malformed record");
    if (static_cast<int>(d.size()) != header.num_experts)
      fail(ctx, "dense_size", "dense size mismatch");
    std::vector<double> dense;
    double sum = 0.0;
    for (const auto& v : d) {
      if (!v.is_number()) fail(ctx, "malformed", "malformed record");
      double p = v.get<double>();
      if (!std::isfinite(p) || p < 0.0)
        fail(ctx, "negative_probability", "negative probability");
      dense.push_back(p);
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      fail(ctx, "probability_mass", "probability mass error");
    lr.dense_probs = std::move(dense);
  }

  // Canonical order: ascending expert index, gate probabilities aligned.
  LayerRouting sorted;
  sorted.experts.reserve(lr.experts.size());
  for (int idx : order) sorted.experts.push_back(lr.experts[static_cast<std::size_t>(idx)]);
  if (lr.gate_probs) {
    std::vector<double> gate;
    gate.reserve(order.size());
    for (int idx : order) gate.push_back((*lr.gate_probs)[static_cast<std::size_t>(idx)]);
    sorted.gate_probs = std::move(gate);
  }
  sorted.dense_probs = std::move(lr.dense_probs);
  return sorted;
}

inline TokenRecord parse_token_line(const std::string& line,
                                    const TraceHeader& header,
                                    const LineContext& ctx) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    fail(ctx, "malformed", "malformed record");
  }
  if (!j.is_object()) fail(ctx, "malformed", "malformed record");
  check_known_keys(
      j, {"sample_id", "token_index", "salient", "input_symbol", "layers"}, ctx);
  TokenRecord t;
  try {
    t.sample_id = j.at("sample_id").get<std::int64_t>();
    t.token_index = j.at("token_index").get<std::int64_t>();
    if (j.contains("salient")) {
      if (!j.at("salient").is_boolean())
        fail(ctx, "malformed", "malformed record");
      t.salient = j.at("salient").get<bool>();
    }
    if (j.contains("input_symbol")) {
      if (!j.at("input_symbol").is_number_integer())
        fail(ctx, "malformed", "malformed record");
      t.input_symbol = j.at("input_symbol").get<int>();
      if (*t.input_symbol < 0 || *t.input_symbol > 65535)
        fail(ctx, "malformed", "input symbol out of range");
    }
  } catch (const nlohmann::json::exception&) {
    fail(ctx, "malformed", "malformed record");
  }
  if (t.sample_id < 0 || t.token_index < 0)
    fail(ctx, "malformed", "malformed record");
  const auto it = j.find("layers");
  if (it == j.end() || !it->is_array())
    fail(ctx, "malformed", "malformed record");
  if (static_cast<int>(it->size()) != header.num_layers)
    fail(ctx, "layer_count", "layer count mismatch");
  for (const auto& layer : *it)
    t.layers.push_back(parse_layer_object(layer, header, ctx));
  return t;
}

/// Cross-line ordering state: samples contiguous, token_index 0,1,2,...
class OrderChecker {
 public:
  void check(const TokenRecord& t, const LineContext& ctx) {
    if (t.sample_id != current_sample_) {
      if (closed_samples_.count(t.sample_id))
        fail(ctx, "sample_order", "sample order violation");
      if (current_sample_ >= 0) closed_samples_.insert(current_sample_);
      current_sample_ = t.sample_id;
      expected_index_ = 0;
      ++sample_count_;
    }
    if (t.token_index != expected_index_)
      fail(ctx, "token_order", "token order violation");
    ++expected_index_;
  }

  std::int64_t sample_count() const { return sample_count_; }

 private:
  std::int64_t current_sample_ = -1;
  std::int64_t expected_index_ = 0;
  std::int64_t sample_count_ = 0;
  std::unordered_set<std::int64_t> closed_samples_;
};

inline bool blank(const std::string& line) {
  for (char c : line)
    if (c != ' ' && c != '\t' && c != '\r') return false;
  return true;
}

}  // namespace detail

/// Parses a trace from a stream, throwing TraceError on the first problem.
/// Memory use is the token list plus per-line scratch; the stream is read
/// once, line by line.
inline RoutingTrace parse_trace(std::istream& in, ParseOptions options = {}) {
  RoutingTrace trace;
  std::string line;
  std::int64_t line_no = 0;
  bool have_header = false;
  detail::OrderChecker order;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::blank(line)) continue;
    detail::LineContext ctx{line_no, options.lenient, nullptr};
    if (!have_header) {
      trace.header = detail::parse_header_line(line, ctx);
      have_header = true;
      continue;
    }
    TokenRecord t = detail::parse_token_line(line, trace.header, ctx);
    order.check(t, ctx);
    trace.tokens.push_back(std::move(t));
  }
  if (!have_header) throw TraceError("bad header", 1);
  return trace;
}

inline RoutingTrace parse_trace_file(const std::filesystem::path& path,
                                     ParseOptions options = {}) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open " + path.string());
  return parse_trace(in, options);
}

/// Validates a stream, collecting every detectable issue instead of throwing.
/// A bad header stops validation (records cannot be interpreted without it).
inline ValidationReport validate(std::istream& in, bool lenient = false) {
  ValidationReport report;
  std::string line;
  std::int64_t line_no = 0;
  bool have_header = false;
  TraceHeader header;
  detail::OrderChecker order;
  bool order_broken = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::blank(line)) continue;
    detail::LineContext ctx{line_no, lenient, &report.warnings};
    if (!have_header) {
      try {
        header = detail::parse_header_line(line, ctx);
        have_header = true;
      } catch (const TraceError& e) {
        report.issues.push_back({e.line(), "bad_header", e.what()});
        report.ok = false;
        return report;
      }
      continue;
    }
    try {
      TokenRecord t = detail::parse_token_line(line, header, ctx);
      ++report.token_count;
      if (!order_broken) {
        try {
          order.check(t, ctx);
        } catch (const TraceError& e) {
          report.issues.push_back({e.line(), "order", e.what()});
          order_broken = true;  // later indices are relative to a broken run
        }
      }
    } catch (const TraceError& e) {
      report.issues.push_back({e.line(), "record", e.what()});
    }
  }
  if (!have_header) {
    report.issues.push_back({1, "bad_header", "bad header"});
    report.ok = false;
    return report;
  }
  report.sample_count = order.sample_count();
  report.ok = report.issues.empty();
  return report;
}

inline ValidationReport validate_file(const std::filesystem::path& path,
                                      bool lenient = false) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open " + path.string());
  return validate(in, lenient);
}

/// Writes the canonical serialization described in the format comment above.
inline void write_trace(const RoutingTrace& trace, std::ostream& out) {
  const TraceHeader& h = trace.header;
  out << "{\"format_version\":" << h.format_version
      << ",\"model_id\":" << detail::json_quote(h.model_id)
      << ",\"num_layers\":" << h.num_layers
      << ",\"num_experts\":" << h.num_experts << ",\"top_k\":" << h.top_k;
  if (h.group_count) out << ",\"group_count\":" << *h.group_count;
  out << "}\n";

  std::string buf;
  for (const TokenRecord& t : trace.tokens) {
    buf.clear();
    buf += "{\"sample_id\":";
    buf += std::to_string(t.sample_id);
    buf += ",\"token_index\":";
    buf += std::to_string(t.token_index);
    if (t.salient) {
      buf += ",\"salient\":";
      buf += *t.salient ? "true" : "false";
    }
    if (t.input_symbol) {
      buf += ",\"input_symbol\":";
      buf += std::to_string(*t.input_symbol);
    }
    buf += ",\"layers\":[";
    for (std::size_t l = 0; l < t.layers.size(); ++l) {
      const LayerRouting& lr = t.layers[l];
      if (l) buf += ',';
      buf += "{\"experts\":[";
      for (std::size_t i = 0; i < lr.experts.size(); ++i) {
        if (i) buf += ',';
        buf += std::to_string(lr.experts[i]);
      }
      buf += ']';
      if (lr.gate_probs) {
        buf += ",\"gate_probs\":[";
        for (std::size_t i = 0; i < lr.gate_probs->size(); ++i) {
          if (i) buf += ',';
          buf += detail::format_probability((*lr.gate_probs)[i]);
        }
        buf += ']';
      }
      if (lr.dense_probs) {
        buf += ",\"dense_probs\":[";
        for (std::size_t i = 0; i < lr.dense_probs->size(); ++i) {
          if (i) buf += ',';
          buf += detail::format_probability((*lr.dense_probs)[i]);
        }
        buf += ']';
      }
      buf += '}';
    }
    buf += "]}\n";
    out << buf;
  }
}

inline std::string write_trace_string(const RoutingTrace& trace) {
  std::ostringstream out;
  write_trace(trace, out);
  return out.str();
}

/// Writes `content` to `path` atomically (temp file + rename).
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::ios_base::failure("cannot open " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::ios_base::failure("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_trace_file(const RoutingTrace& trace,
                             const std::filesystem::path& path) {
  write_file_atomic(path, write_trace_string(trace));
}

/// GroupMap file: {"num_groups":g,"layers":[[group of expert 0, ...], ...]}.
inline GroupMap load_group_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception&) {
    throw TraceError("bad group map");
  }
  GroupMap map;
  try {
    map.num_groups = j.at("num_groups").get<int>();
    map.layers = j.at("layers").get<std::vector<std::vector<int>>>();
  } catch (const nlohmann::json::exception&) {
    throw TraceError("bad group map");
  }
  if (map.num_groups < 1) throw TraceError("bad group map");
  for (const auto& row : map.layers)
    for (int g : row)
      if (g < 0 || g >= map.num_groups) throw TraceError("bad group map");
  return map;
}

inline std::string group_map_to_string(const GroupMap& map) {
  std::string out = "{\"num_groups\":" + std::to_string(map.num_groups) +
                    ",\"layers\":[";
  for (std::size_t l = 0; l < map.layers.size(); ++l) {
    if (l) out += ',';
    out += '[';
    for (std::size_t e = 0; e < map.layers[l].size(); ++e) {
      if (e) out += ',';
      out += std::to_string(map.layers[l][e]);
    }
    out += ']';
  }
  out += "]}\n";
  return out;
}

inline void save_group_map(const GroupMap& map,
                           const std::filesystem::path& path) {
  write_file_atomic(path, group_map_to_string(map));
}

}  // namespace moescope
