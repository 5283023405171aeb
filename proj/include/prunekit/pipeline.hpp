#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunekit/benchmark.hpp"
#include "prunekit/checkpoint.hpp"
#include "prunekit/gates.hpp"
#include "prunekit/report.hpp"
#include "prunekit/surgery.hpp"
#include "prunekit/synthetic.hpp"
#include "prunekit/training.hpp"

namespace prunekit {

struct GateSelectionConfig {
  double lambda_attn = -1;  // required for l0 unless auto_lambda
  double lambda_ff = -1;
  double lambda_scale = 1.0;  // paper-style multiplier applied to the base weights
  bool auto_lambda = false;   // calibrate base weights on a log grid first
  double keep_fraction = -1;  // required for gain
  double bernoulli_p = -1;    // required for random
  std::string objective = "ce";  // ce | distill
  double learning_rate = 0.1;
  int batch_size = 24;
  double epochs = 1.0;
  double data_fraction = 1.0;
  double threshold = 0.5;
  std::string penalty_mode = "expect_one";  // expect_one | expect_nonzero
  double beta = 2.0 / 3.0;
  double gamma_low = -0.1;
  double zeta = 1.1;
  double log_alpha_init = 2.0;
  double distill_temperature = 2.0;
  double distill_alpha = 0.9;
};

struct ContinuationConfig {
  std::string mode = "retrain";  // none | retrain | distill
  double epochs = 1.0;
  double learning_rate = 3e-4;
  double distill_temperature = 2.0;
  double distill_alpha = 0.9;
};

struct BenchmarkConfig {
  int repeats = 5;     // 0 disables timing (deterministic reports)
  int batch_size = 1;  // batch-1 decoding is the headline timing mode
  int examples = 0;    // 0 means dev-set sized
};

struct PipelinePaths {
  std::string train_data;
  std::string dev_data;
  std::string base_checkpoint;
  std::string out_dir = "out";
};

struct PipelineConfig {
  TransformerConfig model;
  SyntheticTaskConfig task;
  TrainConfig train;
  std::string method = "l0";  // random | gain | l0
  GateSelectionConfig gate;
  ContinuationConfig continuation;
  int rounding_granularity = 1;
  std::vector<uint64_t> seeds{1};
  BenchmarkConfig benchmark;
  double holdout_fraction = 0.1;
  PipelinePaths paths;

  void validate() const {
    model.validate();
    task.validate();
    train.validate();
    if (seeds.empty()) throw ValidationError("PipelineConfig.seeds: need at least one seed");
    if (method != "random" && method != "gain" && method != "l0")
      throw ValidationError("PipelineConfig.method: must be random|gain|l0, got '" + method + "'");
    if (method == "random" && (gate.bernoulli_p < 0 || gate.bernoulli_p > 1))
      throw ValidationError("PipelineConfig: method random requires bernoulli_p in [0, 1]");
    if (method == "gain" && !(gate.keep_fraction > 0 && gate.keep_fraction <= 1))
      throw ValidationError("PipelineConfig: method gain requires keep_fraction in (0, 1]");
    if (method == "l0" && !gate.auto_lambda && (gate.lambda_attn < 0 || gate.lambda_ff < 0))
      throw ValidationError(
          "PipelineConfig: method l0 requires lambda_attn and lambda_ff >= 0 (or auto_lambda)");
    if (gate.objective != "ce" && gate.objective != "distill")
      throw ValidationError("PipelineConfig.gate.objective: must be ce|distill");
    if (gate.penalty_mode != "expect_one" && gate.penalty_mode != "expect_nonzero")
      throw ValidationError("PipelineConfig.gate.penalty_mode: must be expect_one|expect_nonzero");
    if (!(gate.data_fraction > 0 && gate.data_fraction <= 1))
      throw ValidationError("PipelineConfig.gate.data_fraction: must be in (0, 1]");
    if (continuation.mode != "none" && continuation.mode != "retrain" &&
        continuation.mode != "distill")
      throw ValidationError("PipelineConfig.continuation.mode: must be none|retrain|distill");
    if (rounding_granularity < 1)
      throw ValidationError("PipelineConfig.rounding_granularity: must be >= 1");
    if (holdout_fraction < 0 || holdout_fraction >= 1)
      throw ValidationError("PipelineConfig.holdout_fraction: must be in [0, 1)");
    if (benchmark.repeats < 0)
      throw ValidationError("PipelineConfig.benchmark.repeats: must be >= 0");
  }

  nlohmann::ordered_json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
};

inline nlohmann::ordered_json PipelineConfig::to_json() const {
  nlohmann::ordered_json j;
  j["model"] = {{"n_layers", model.n_layers},     {"n_heads", model.n_heads},
                {"d_model", model.d_model},       {"d_ff", model.d_ff},
                {"vocab_size", model.vocab_size}, {"max_seq_len", model.max_seq_len},
                {"activation", activation_name(model.activation)}};
  j["task"] = {{"vocab_size", task.vocab_size},
               {"seq_len", task.seq_len},
               {"n_train", task.n_train},
               {"n_dev", task.n_dev},
               {"pattern", task.pattern},
               {"noise_rate", task.noise_rate},
               {"no_answer_fraction", task.no_answer_fraction},
               {"seed", task.seed}};
  j["train"] = {{"learning_rate", train.learning_rate},
                {"batch_size", train.batch_size},
                {"epochs", train.epochs},
                {"grad_accumulation_steps", train.grad_accumulation_steps}};
  j["method"] = method;
  j["gate"] = {{"lambda_attn", gate.lambda_attn},
               {"lambda_ff", gate.lambda_ff},
               {"lambda_scale", gate.lambda_scale},
               {"auto_lambda", gate.auto_lambda},
               {"keep_fraction", gate.keep_fraction},
               {"bernoulli_p", gate.bernoulli_p},
               {"objective", gate.objective},
               {"learning_rate", gate.learning_rate},
               {"batch_size", gate.batch_size},
               {"epochs", gate.epochs},
               {"data_fraction", gate.data_fraction},
               {"threshold", gate.threshold},
               {"penalty_mode", gate.penalty_mode},
               {"beta", gate.beta},
               {"gamma_low", gate.gamma_low},
               {"zeta", gate.zeta},
               {"log_alpha_init", gate.log_alpha_init},
               {"distill_temperature", gate.distill_temperature},
               {"distill_alpha", gate.distill_alpha}};
  j["continuation"] = {{"mode", continuation.mode},
                       {"epochs", continuation.epochs},
                       {"learning_rate", continuation.learning_rate},
                       {"distill_temperature", continuation.distill_temperature},
                       {"distill_alpha", continuation.distill_alpha}};
  j["rounding_granularity"] = rounding_granularity;
  j["seeds"] = seeds;
  j["benchmark"] = {{"repeats", benchmark.repeats},
                    {"batch_size", benchmark.batch_size},
                    {"examples", benchmark.examples}};
  j["holdout_fraction"] = holdout_fraction;
  j["paths"] = {{"train_data", paths.train_data},
                {"dev_data", paths.dev_data},
                {"base_checkpoint", paths.base_checkpoint},
                {"out_dir", paths.out_dir}};
  return j;
}

namespace detail {

template <typename V>
void read_field(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("config field '") + key + "': " + e.what());
    }
  }
}

}  // namespace detail

inline PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  PipelineConfig c;
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::read_field(m, "n_layers", c.model.n_layers);
    detail::read_field(m, "n_heads", c.model.n_heads);
    detail::read_field(m, "d_model", c.model.d_model);
    detail::read_field(m, "d_ff", c.model.d_ff);
    detail::read_field(m, "vocab_size", c.model.vocab_size);
    detail::read_field(m, "max_seq_len", c.model.max_seq_len);
    if (m.contains("activation"))
      c.model.activation = activation_from_name(m["activation"].get<std::string>());
  }
  if (j.contains("task")) {
    const auto& t = j["task"];
    detail::read_field(t, "vocab_size", c.task.vocab_size);
    detail::read_field(t, "seq_len", c.task.seq_len);
    detail::read_field(t, "n_train", c.task.n_train);
    detail::read_field(t, "n_dev", c.task.n_dev);
    detail::read_field(t, "pattern", c.task.pattern);
    detail::read_field(t, "noise_rate", c.task.noise_rate);
    detail::read_field(t, "no_answer_fraction", c.task.no_answer_fraction);
    detail::read_field(t, "seed", c.task.seed);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::read_field(t, "learning_rate", c.train.learning_rate);
    detail::read_field(t, "batch_size", c.train.batch_size);
    detail::read_field(t, "epochs", c.train.epochs);
    detail::read_field(t, "grad_accumulation_steps", c.train.grad_accumulation_steps);
  }
  detail::read_field(j, "method", c.method);
  if (j.contains("gate")) {
    const auto& g = j["gate"];
    detail::read_field(g, "lambda_attn", c.gate.lambda_attn);
    detail::read_field(g, "lambda_ff", c.gate.lambda_ff);
    detail::read_field(g, "lambda_scale", c.gate.lambda_scale);
    detail::read_field(g, "auto_lambda", c.gate.auto_lambda);
    detail::read_field(g, "keep_fraction", c.gate.keep_fraction);
    detail::read_field(g, "bernoulli_p", c.gate.bernoulli_p);
    detail::read_field(g, "objective", c.gate.objective);
    detail::read_field(g, "learning_rate", c.gate.learning_rate);
    detail::read_field(g, "batch_size", c.gate.batch_size);
    detail::read_field(g, "epochs", c.gate.epochs);
    detail::read_field(g, "data_fraction", c.gate.data_fraction);
    detail::read_field(g, "threshold", c.gate.threshold);
    detail::read_field(g, "penalty_mode", c.gate.penalty_mode);
    detail::read_field(g, "beta", c.gate.beta);
    detail::read_field(g, "gamma_low", c.gate.gamma_low);
    detail::read_field(g, "zeta", c.gate.zeta);
    detail::read_field(g, "log_alpha_init", c.gate.log_alpha_init);
    detail::read_field(g, "distill_temperature", c.gate.distill_temperature);
    detail::read_field(g, "distill_alpha", c.gate.distill_alpha);
  }
  if (j.contains("continuation")) {
    const auto& k = j["continuation"];
    detail::read_field(k, "mode", c.continuation.mode);
    detail::read_field(k, "epochs", c.continuation.epochs);
    detail::read_field(k, "learning_rate", c.continuation.learning_rate);
    detail::read_field(k, "distill_temperature", c.continuation.distill_temperature);
    detail::read_field(k, "distill_alpha", c.continuation.distill_alpha);
  }
  detail::read_field(j, "rounding_granularity", c.rounding_granularity);
  detail::read_field(j, "seeds", c.seeds);
  if (j.contains("benchmark")) {
    const auto& b = j["benchmark"];
    detail::read_field(b, "repeats", c.benchmark.repeats);
    detail::read_field(b, "batch_size", c.benchmark.batch_size);
    detail::read_field(b, "examples", c.benchmark.examples);
  }
  detail::read_field(j, "holdout_fraction", c.holdout_fraction);
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    detail::read_field(p, "train_data", c.paths.train_data);
    detail::read_field(p, "dev_data", c.paths.dev_data);
    detail::read_field(p, "base_checkpoint", c.paths.base_checkpoint);
    detail::read_field(p, "out_dir", c.paths.out_dir);
  }
  return c;
}

namespace detail {

inline GateTrainConfig gate_train_config(const PipelineConfig& cfg, uint64_t seed) {
  GateTrainConfig g;
  g.learning_rate = cfg.gate.learning_rate;
  g.batch_size = cfg.gate.batch_size;
  g.epochs = cfg.gate.epochs;
  g.seed = seed;
  g.log_alpha_init = cfg.gate.log_alpha_init;
  g.dist.beta = cfg.gate.beta;
  g.dist.gamma_low = cfg.gate.gamma_low;
  g.dist.zeta = cfg.gate.zeta;
  g.penalty_mode = cfg.gate.penalty_mode == "expect_one" ? PenaltyMode::kExpectOne
                                                         : PenaltyMode::kExpectNonzero;
  g.objective = cfg.gate.objective == "distill" ? Objective::kDistillation
                                                : Objective::kCrossEntropy;
  g.distill_temperature = cfg.gate.distill_temperature;
  g.distill_alpha = cfg.gate.distill_alpha;
  return g;
}

inline double family_pct_removed(const std::vector<LayerRetention>& layers, bool attn) {
  int64_t before = 0, after = 0;
  for (const auto& l : layers) {
    before += attn ? l.heads_before : l.ff_before;
    after += attn ? l.heads_after : l.ff_after;
  }
  return before > 0 ? 100.0 * (1.0 - static_cast<double>(after) / before) : 0.0;
}

}  // namespace detail

// Runs the full pruning pipeline: obtain a task model, determine gates by the
// configured method, finalize and optionally round the masks, prune attention
// then feed-forward, optionally continue training, and measure each stage.
// Attention and feed-forward gate configurations are trained independently
// and combined. Any stage failure aborts with the stage name after writing a
// report marked failed.
inline PruneReport run_pipeline(const PipelineConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  PruneReport report;
  report.method = cfg.method;
  report.config_echo = cfg.to_json();
  report.lambda_scale = cfg.gate.lambda_scale;
  std::string stage = "load-data";
  try {
    fs::create_directories(cfg.paths.out_dir);
    fs::create_directories(fs::path(cfg.paths.out_dir) / "checkpoints");
    fs::create_directories(fs::path(cfg.paths.out_dir) / "history");

    Dataset train_data, dev_data;
    if (!cfg.paths.train_data.empty()) {
      train_data = read_jsonl(cfg.paths.train_data);
      if (!cfg.paths.dev_data.empty()) {
        dev_data = read_jsonl(cfg.paths.dev_data);
      } else {
        // holdout split of the training data
        size_t n_dev = static_cast<size_t>(
            std::llround(cfg.holdout_fraction * static_cast<double>(train_data.size())));
        n_dev = std::min(std::max<size_t>(n_dev, 1), train_data.size() - 1);
        dev_data.assign(train_data.end() - n_dev, train_data.end());
        train_data.resize(train_data.size() - n_dev);
      }
    } else {
      auto task = generate_synthetic_task(cfg.task);
      train_data = std::move(task.train);
      dev_data = std::move(task.dev);
    }
    size_t n_gate = std::max<size_t>(
        1, std::llround(cfg.gate.data_fraction * static_cast<double>(train_data.size())));
    Dataset gate_data(train_data.begin(), train_data.begin() + std::min(n_gate, train_data.size()));

    int bench_examples = cfg.benchmark.examples > 0 ? cfg.benchmark.examples
                                                    : static_cast<int>(dev_data.size());
    int bench_seq = static_cast<int>(dev_data.front().tokens.size());

    double lambda_attn0 = cfg.gate.lambda_attn, lambda_ff0 = cfg.gate.lambda_ff;
    bool calibrated = false;

    for (uint64_t seed : cfg.seeds) {
      std::string tag = "_seed" + std::to_string(seed);
      RunResult run;
      run.seed = seed;

      stage = "base-model";
      Model<float> base;
      if (!cfg.paths.base_checkpoint.empty()) {
        base = load_checkpoint(cfg.paths.base_checkpoint).model;
      } else {
        TrainConfig tc = cfg.train;
        tc.seed = seed;
        auto trained = train_task(build_model<float>(cfg.model, seed), train_data, tc);
        base = std::move(trained.model);
        write_loss_history_csv(
            (fs::path(cfg.paths.out_dir) / "history" / ("base" + tag + ".csv")).string(),
            trained.history);
      }
      save_checkpoint(
          (fs::path(cfg.paths.out_dir) / "checkpoints" / ("base" + tag + ".ckpt")).string(), base);

      stage = "evaluate-base";
      run.metrics_base = evaluate(base, dev_data);
      run.params_before = count_params(base);
      run.flops_before = count_flops(base, bench_seq, cfg.benchmark.batch_size);
      run.bytes_before = checkpoint_payload_bytes(base);
      if (cfg.benchmark.repeats > 0) {
        auto lat = benchmark_latency(base, cfg.benchmark.batch_size, bench_seq,
                                     cfg.benchmark.repeats, bench_examples);
        run.latency_before_s = lat.median_s;
        run.latency_spread_before_s = lat.spread_s;
      }

      stage = "gate-selection";
      GateMask mask;
      ImportanceScores scores;
      std::optional<L0TrainResult<float>> l0;
      if (cfg.method == "random") {
        mask = random_gates_with_scores(base.heads_per_layer(), base.ff_per_layer(),
                                        cfg.gate.bernoulli_p, seed, &scores);
      } else if (cfg.method == "gain") {
        scores = gain_scores(base, gate_data, 0, cfg.gate.batch_size);
        mask = threshold_scores(scores, cfg.gate.keep_fraction);
      } else {
        base.set_trainable(false);
        if (cfg.gate.auto_lambda && !calibrated) {
          auto cal = calibrate_lambda(base, gate_data, detail::gate_train_config(cfg, seed));
          lambda_attn0 = cal.lambda_attn;
          lambda_ff0 = cal.lambda_ff;
          calibrated = true;
        }
        PenaltyWeights w;
        w.lambda_attn = lambda_attn0 * cfg.gate.lambda_scale;
        w.lambda_ff = lambda_ff0 * cfg.gate.lambda_scale;
        report.lambda_attn_effective = w.lambda_attn;
        report.lambda_ff_effective = w.lambda_ff;
        l0 = train_gates_l0(base, gate_data, w, detail::gate_train_config(cfg, seed));
        base.set_trainable(true);
        mask = finalize_gates(l0->attn, l0->ff, cfg.gate.threshold);
        scores.attn = deterministic_gate_values(l0->attn);
        scores.ff = deterministic_gate_values(l0->ff);
        write_loss_history_csv(
            (fs::path(cfg.paths.out_dir) / "history" / ("gates_attn" + tag + ".csv")).string(),
            l0->attn_history);
        write_loss_history_csv(
            (fs::path(cfg.paths.out_dir) / "history" / ("gates_ff" + tag + ".csv")).string(),
            l0->ff_history);
      }
      for (size_t l = 0; l < mask.attn.size(); ++l) {
        int kept_a = 0, kept_f = 0;
        for (float v : mask.attn[l]) kept_a += v == 1.0f;
        for (float v : mask.ff[l]) kept_f += v == 1.0f;
        if (kept_a == 1) run.guard_fixed_attn_layers.push_back(static_cast<int>(l));
        if (kept_f == 1) run.guard_fixed_ff_layers.push_back(static_cast<int>(l));
      }

      stage = "rounding";
      if (cfg.rounding_granularity > 1)
        mask = round_sizes(mask, cfg.rounding_granularity, scores);

      stage = "surgery";
      auto pruned = prune_model(base, mask);
      run.layers = retention_records(base, pruned);
      run.pct_attn_removed = detail::family_pct_removed(run.layers, true);
      run.pct_ff_removed = detail::family_pct_removed(run.layers, false);
      run.equivalence_max_abs_diff = verify_equivalence(base, mask, pruned, 3, seed);
      save_checkpoint(
          (fs::path(cfg.paths.out_dir) / "checkpoints" / ("pruned" + tag + ".ckpt")).string(),
          pruned, &mask, l0 ? &l0->attn : nullptr, l0 ? &l0->ff : nullptr);

      stage = "evaluate-pruned";
      run.metrics_pruned = evaluate(pruned, dev_data);
      run.params_after = count_params(pruned);
      run.flops_after = count_flops(pruned, bench_seq, cfg.benchmark.batch_size);
      run.bytes_after = checkpoint_payload_bytes(pruned);
      if (cfg.benchmark.repeats > 0) {
        auto lat = benchmark_latency(pruned, cfg.benchmark.batch_size, bench_seq,
                                     cfg.benchmark.repeats, bench_examples);
        run.latency_after_s = lat.median_s;
        run.latency_spread_after_s = lat.spread_s;
      }

      stage = "continuation";
      if (cfg.continuation.mode == "none") {
        run.metrics_final = run.metrics_pruned;
        save_checkpoint(
            (fs::path(cfg.paths.out_dir) / "checkpoints" / ("final" + tag + ".ckpt")).string(),
            pruned, &mask);
      } else {
        TrainConfig cc;
        cc.learning_rate = cfg.continuation.learning_rate;
        cc.batch_size = cfg.train.batch_size;
        cc.epochs = cfg.continuation.epochs;
        cc.seed = seed;
        cc.distill_temperature = cfg.continuation.distill_temperature;
        cc.distill_alpha = cfg.continuation.distill_alpha;
        TrainResult<float> cont = cfg.continuation.mode == "retrain"
                                      ? retrain(pruned, train_data, cc)
                                      : distill(pruned, base, train_data, cc);
        write_loss_history_csv(
            (fs::path(cfg.paths.out_dir) / "history" / ("continuation" + tag + ".csv")).string(),
            cont.history);
        stage = "evaluate-final";
        run.metrics_final = evaluate(cont.model, dev_data);
        save_checkpoint(
            (fs::path(cfg.paths.out_dir) / "checkpoints" / ("final" + tag + ".ckpt")).string(),
            cont.model, &mask);
      }
      report.runs.push_back(std::move(run));
    }

    stage = "report";
    emit_report(report, "json", cfg.paths.out_dir);
    emit_report(report, "csv", cfg.paths.out_dir);
  } catch (const std::exception& e) {
    report.status = "failed";
    report.failed_stage = stage;
    report.error = e.what();
    try {
      emit_report(report, "json", cfg.paths.out_dir);
    } catch (...) {
    }
    throw StageError(stage, e.what());
  }
  return report;
}

}  // namespace prunekit
