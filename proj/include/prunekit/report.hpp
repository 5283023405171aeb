#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunekit/surgery.hpp"
#include "prunekit/transformer.hpp"

namespace prunekit {

// All floating-point values in emitted reports carry four decimals, applied
// once here so the JSON and CSV encodings agree bit-for-bit after parsing.
inline double round4(double x) { return std::nearbyint(x * 1e4) / 1e4; }

struct RunResult {
  uint64_t seed = 0;
  std::vector<LayerRetention> layers;
  double pct_attn_removed = 0;
  double pct_ff_removed = 0;
  int64_t params_before = 0, params_after = 0;
  int64_t flops_before = 0, flops_after = 0;
  int64_t bytes_before = 0, bytes_after = 0;
  std::optional<double> latency_before_s, latency_after_s;
  std::optional<double> latency_spread_before_s, latency_spread_after_s;
  Metrics metrics_base, metrics_pruned, metrics_final;
  double equivalence_max_abs_diff = 0;
  std::vector<int> guard_fixed_attn_layers, guard_fixed_ff_layers;
};

struct PruneReport {
  std::string status = "ok";
  std::string failed_stage;
  std::string error;
  std::string method;
  nlohmann::ordered_json config_echo;
  double lambda_attn_effective = 0, lambda_ff_effective = 0, lambda_scale = 1;
  std::vector<RunResult> runs;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double spread_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0;
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline nlohmann::ordered_json metrics_json(const Metrics& m) {
  return {{"span_exact_match", round4(m.span_exact_match)},
          {"start_acc", round4(m.start_acc)},
          {"end_acc", round4(m.end_acc)},
          {"mean_loss", round4(m.mean_loss)}};
}

inline std::string fmt4(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", round4(x));
  return buf;
}

}  // namespace detail

inline nlohmann::ordered_json report_to_json(const PruneReport& report) {
  nlohmann::ordered_json j;
  j["schema"] = "prunekit-report-v1";
  j["status"] = report.status;
  if (report.status != "ok") {
    j["failed_stage"] = report.failed_stage;
    j["error"] = report.error;
  }
  j["method"] = report.method;
  j["config"] = report.config_echo;
  if (report.method == "l0") {
    j["lambda"] = {{"attn_effective", report.lambda_attn_effective},
                   {"ff_effective", report.lambda_ff_effective},
                   {"scale", report.lambda_scale}};
  }
  auto runs = nlohmann::ordered_json::array();
  for (const auto& r : report.runs) {
    nlohmann::ordered_json rj;
    rj["seed"] = r.seed;
    auto layers = nlohmann::ordered_json::array();
    for (const auto& l : r.layers) {
      layers.push_back({{"layer", l.layer},
                        {"heads_before", l.heads_before},
                        {"heads_after", l.heads_after},
                        {"ff_before", l.ff_before},
                        {"ff_after", l.ff_after}});
    }
    rj["layers"] = std::move(layers);
    rj["pct_attn_removed"] = round4(r.pct_attn_removed);
    rj["pct_ff_removed"] = round4(r.pct_ff_removed);
    rj["params_before"] = r.params_before;
    rj["params_after"] = r.params_after;
    rj["flops_before"] = r.flops_before;
    rj["flops_after"] = r.flops_after;
    rj["bytes_before"] = r.bytes_before;
    rj["bytes_after"] = r.bytes_after;
    if (r.latency_before_s) {
      rj["latency_before_s"] = round4(*r.latency_before_s);
      rj["latency_after_s"] = round4(*r.latency_after_s);
      rj["latency_spread_before_s"] = round4(*r.latency_spread_before_s);
      rj["latency_spread_after_s"] = round4(*r.latency_spread_after_s);
    }
    rj["metrics_base"] = detail::metrics_json(r.metrics_base);
    rj["metrics_pruned"] = detail::metrics_json(r.metrics_pruned);
    rj["metrics_final"] = detail::metrics_json(r.metrics_final);
    rj["equivalence_max_abs_diff"] = round4(r.equivalence_max_abs_diff);
    rj["guard_fixed_attn_layers"] = r.guard_fixed_attn_layers;
    rj["guard_fixed_ff_layers"] = r.guard_fixed_ff_layers;
    runs.push_back(std::move(rj));
  }
  j["runs"] = std::move(runs);

  auto collect = [&](auto getter) {
    std::vector<double> v;
    for (const auto& r : report.runs) v.push_back(getter(r));
    return v;
  };
  nlohmann::ordered_json agg;
  agg["seeds"] = report.runs.size();
  agg["median_pct_attn_removed"] =
      round4(detail::median_of(collect([](const RunResult& r) { return r.pct_attn_removed; })));
  agg["median_pct_ff_removed"] =
      round4(detail::median_of(collect([](const RunResult& r) { return r.pct_ff_removed; })));
  agg["median_em_base"] = round4(
      detail::median_of(collect([](const RunResult& r) { return r.metrics_base.span_exact_match; })));
  agg["median_em_pruned"] = round4(detail::median_of(
      collect([](const RunResult& r) { return r.metrics_pruned.span_exact_match; })));
  agg["median_em_final"] = round4(detail::median_of(
      collect([](const RunResult& r) { return r.metrics_final.span_exact_match; })));
  agg["spread_em_final"] = round4(detail::spread_of(
      collect([](const RunResult& r) { return r.metrics_final.span_exact_match; })));
  agg["median_params_after"] =
      round4(detail::median_of(collect([](const RunResult& r) { return double(r.params_after); })));
  agg["median_flops_after"] =
      round4(detail::median_of(collect([](const RunResult& r) { return double(r.flops_after); })));
  bool have_latency = !report.runs.empty();
  for (const auto& r : report.runs) have_latency = have_latency && r.latency_before_s.has_value();
  if (have_latency) {
    double mb = detail::median_of(collect([](const RunResult& r) { return *r.latency_before_s; }));
    double ma = detail::median_of(collect([](const RunResult& r) { return *r.latency_after_s; }));
    agg["median_latency_before_s"] = round4(mb);
    agg["median_latency_after_s"] = round4(ma);
    agg["median_speedup"] = round4(ma > 0 ? mb / ma : 0);
  }
  j["aggregate"] = std::move(agg);
  return j;
}

// Writes the plot-ready tables: one summary row per run, the per-layer
// retention table, and accuracy-vs-parameter-count points.
inline void emit_report_csv(const PruneReport& report, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  {
    std::ofstream out(fs::path(out_dir) / "summary.csv");
    if (!out) throw IoError("emit_report: cannot write summary.csv in '" + out_dir + "'");
    out << "seed,method,pct_attn_removed,pct_ff_removed,params_before,params_after,"
           "flops_before,flops_after,bytes_before,bytes_after,latency_before_s,latency_after_s,"
           "em_base,em_pruned,em_final,start_acc_final,end_acc_final,mean_loss_final\n";
    for (const auto& r : report.runs) {
      out << r.seed << ',' << report.method << ',' << detail::fmt4(r.pct_attn_removed) << ','
          << detail::fmt4(r.pct_ff_removed) << ',' << r.params_before << ',' << r.params_after
          << ',' << r.flops_before << ',' << r.flops_after << ',' << r.bytes_before << ','
          << r.bytes_after << ','
          << (r.latency_before_s ? detail::fmt4(*r.latency_before_s) : std::string()) << ','
          << (r.latency_after_s ? detail::fmt4(*r.latency_after_s) : std::string()) << ','
          << detail::fmt4(r.metrics_base.span_exact_match) << ','
          << detail::fmt4(r.metrics_pruned.span_exact_match) << ','
          << detail::fmt4(r.metrics_final.span_exact_match) << ','
          << detail::fmt4(r.metrics_final.start_acc) << ','
          << detail::fmt4(r.metrics_final.end_acc) << ','
          << detail::fmt4(r.metrics_final.mean_loss) << "\n";
    }
  }
  {
    std::ofstream out(fs::path(out_dir) / "layers.csv");
    if (!out) throw IoError("emit_report: cannot write layers.csv in '" + out_dir + "'");
    out << "seed,layer,heads_before,heads_after,ff_before,ff_after,heads_retained_pct,"
           "ff_retained_pct\n";
    for (const auto& r : report.runs)
      for (const auto& l : r.layers) {
        out << r.seed << ',' << l.layer << ',' << l.heads_before << ',' << l.heads_after << ','
            << l.ff_before << ',' << l.ff_after << ','
            << detail::fmt4(100.0 * l.heads_after / std::max(1, l.heads_before)) << ','
            << detail::fmt4(100.0 * l.ff_after / std::max(1, l.ff_before)) << "\n";
      }
  }
  {
    std::ofstream out(fs::path(out_dir) / "accuracy_vs_params.csv");
    if (!out)
      throw IoError("emit_report: cannot write accuracy_vs_params.csv in '" + out_dir + "'");
    out << "seed,stage,params,span_exact_match\n";
    for (const auto& r : report.runs) {
      out << r.seed << ",base," << r.params_before << ','
          << detail::fmt4(r.metrics_base.span_exact_match) << "\n";
      out << r.seed << ",pruned," << r.params_after << ','
          << detail::fmt4(r.metrics_pruned.span_exact_match) << "\n";
      out << r.seed << ",final," << r.params_after << ','
          << detail::fmt4(r.metrics_final.span_exact_match) << "\n";
    }
  }
}

inline void emit_report(const PruneReport& report, const std::string& format,
                        const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  if (format == "json") {
    std::ofstream out(fs::path(out_dir) / "report.json");
    if (!out) throw IoError("emit_report: cannot write report.json in '" + out_dir + "'");
    out << report_to_json(report).dump(2) << "\n";
  } else if (format == "csv") {
    emit_report_csv(report, out_dir);
  } else {
    throw ValidationError("emit_report: format must be 'json' or 'csv', got '" + format + "'");
  }
}

}  // namespace prunekit
