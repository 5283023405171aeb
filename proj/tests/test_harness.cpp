#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "prunekit/prunekit.hpp"

using namespace prunekit;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i].tokens != b[i].tokens || a[i].start != b[i].start || a[i].end != b[i].end)
      return false;
  return true;
}

bool weights_equal(const Model<float>& a, const Model<float>& b) {
  auto pa = a.parameters();
  auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].shape() != pb[i].shape()) return false;
    for (size_t j = 0; j < pa[i].numel(); ++j)
      if (pa[i].data()[j] != pb[i].data()[j]) return false;
  }
  return true;
}

PipelineConfig fast_pipeline_config(const std::string& out_dir) {
  PipelineConfig cfg;
  cfg.model.n_layers = 2;
  cfg.model.n_heads = 2;
  cfg.model.d_model = 16;
  cfg.model.d_ff = 16;
  cfg.model.vocab_size = 16;
  cfg.model.max_seq_len = 16;
  cfg.task.vocab_size = 16;
  cfg.task.seq_len = 12;
  cfg.task.n_train = 96;
  cfg.task.n_dev = 48;
  cfg.task.no_answer_fraction = 0.0;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 24;
  cfg.method = "random";
  cfg.gate.bernoulli_p = 1.0;
  cfg.continuation.mode = "none";
  cfg.benchmark.repeats = 0;
  cfg.seeds = {3};
  cfg.paths.out_dir = out_dir;
  return cfg;
}

}  // namespace

TEST_CASE("synthetic task generation is deterministic and well-formed") {
  SyntheticTaskConfig cfg;
  cfg.vocab_size = 32;
  cfg.seq_len = 48;
  cfg.n_train = 1000;
  cfg.n_dev = 50;
  cfg.seed = 77;
  auto a = generate_synthetic_task(cfg);
  auto b = generate_synthetic_task(cfg);
  REQUIRE(datasets_equal(a.train, b.train));
  REQUIRE(datasets_equal(a.dev, b.dev));
  REQUIRE(a.train.size() == 1000);

  int answerable = 0;
  for (const auto& ex : a.train) {
    REQUIRE(static_cast<int>(ex.tokens.size()) == 48);
    for (int t : ex.tokens) REQUIRE((t >= 0 && t < 32));
    if (ex.start == 0) {
      REQUIRE(ex.end == 0);  // no-answer convention
    } else {
      ++answerable;
      REQUIRE(ex.start >= 3);
      REQUIRE(ex.end > ex.start);
      REQUIRE(ex.end < 48);
      // span is opened by the asked key and closed by its pair
      REQUIRE(ex.tokens[ex.start] == ex.tokens[1]);
    }
  }
  REQUIRE(answerable > 800);  // default no-answer fraction is 0.1
}

TEST_CASE("synthetic task rejects infeasible configs naming the field") {
  SyntheticTaskConfig cfg;
  cfg.seq_len = 4;  // passage of one token cannot hold a two-token span
  REQUIRE_THROWS_MATCHES(generate_synthetic_task(cfg), ValidationError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("seq_len")));
  SyntheticTaskConfig bad;
  bad.n_dev = 0;
  REQUIRE_THROWS_MATCHES(generate_synthetic_task(bad), ValidationError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("n_dev")));
  SyntheticTaskConfig unknown;
  unknown.pattern = "other";
  REQUIRE_THROWS_AS(generate_synthetic_task(unknown), ValidationError);
}

TEST_CASE("jsonl round trip and malformed input") {
  TempDir tmp("prunekit_jsonl_test");
  SyntheticTaskConfig cfg;
  cfg.n_train = 20;
  cfg.n_dev = 1;
  auto task = generate_synthetic_task(cfg);
  auto path = tmp.file("data.jsonl");
  write_jsonl(path, task.train);
  auto back = read_jsonl(path);
  REQUIRE(datasets_equal(task.train, back));

  auto bad = tmp.file("bad.jsonl");
  std::ofstream(bad) << "{\"tokens\": [1,2,3], \"start\": 0}\n";
  REQUIRE_THROWS_MATCHES(read_jsonl(bad), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("start")));
  REQUIRE_THROWS_AS(read_jsonl(tmp.file("missing.jsonl")), IoError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  TempDir tmp("prunekit_ckpt_test");
  TransformerConfig mc;
  mc.n_layers = 2;
  mc.n_heads = 4;
  mc.d_model = 32;
  mc.d_ff = 24;
  mc.vocab_size = 20;
  mc.max_seq_len = 12;
  auto m = build_model<float>(mc, 41);
  auto path = tmp.file("model.ckpt");
  save_checkpoint(path, m);
  auto back = load_checkpoint(path);
  REQUIRE(weights_equal(m, back.model));
  REQUIRE_FALSE(back.mask.has_value());

  // pruned, non-identical per-layer sizes survive the round trip
  auto mask = random_gates(m.heads_per_layer(), m.ff_per_layer(), 0.5, 9);
  auto pruned = prune_model(m, mask);
  HardConcreteParams d;
  auto gates_attn = make_hard_concrete<float>(pruned.heads_per_layer(), 1.25, d);
  auto gates_ff = make_hard_concrete<float>(pruned.ff_per_layer(), -0.75, d);
  auto ppath = tmp.file("pruned.ckpt");
  save_checkpoint(ppath, pruned, &mask, &gates_attn, &gates_ff);
  auto pback = load_checkpoint(ppath);
  REQUIRE(weights_equal(pruned, pback.model));
  REQUIRE(pback.model.heads_per_layer() == pruned.heads_per_layer());
  REQUIRE(pback.model.ff_per_layer() == pruned.ff_per_layer());
  REQUIRE(pback.mask.has_value());
  REQUIRE(pback.mask->attn == mask.attn);
  REQUIRE(pback.mask->ff == mask.ff);
  REQUIRE(pback.gates_attn.has_value());
  REQUIRE(pback.gates_attn->log_alpha[0].data()[0] == 1.25f);
  REQUIRE(pback.gates_ff->log_alpha[0].data()[0] == -0.75f);

  // a second save of the loaded model is byte-identical
  auto repath = tmp.file("again.ckpt");
  save_checkpoint(repath, pback.model, &*pback.mask, &*pback.gates_attn, &*pback.gates_ff);
  REQUIRE(slurp(repath) == slurp(ppath));
}

TEST_CASE("checkpoint loader rejects corruption naming the cause") {
  TempDir tmp("prunekit_ckpt_bad");
  TransformerConfig mc;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_model = 8;
  mc.d_ff = 8;
  mc.vocab_size = 8;
  mc.max_seq_len = 8;
  auto m = build_model<float>(mc, 42);
  auto path = tmp.file("model.ckpt");
  save_checkpoint(path, m);

  auto bytes = slurp(path);
  auto flipped = bytes;
  flipped[4] ^= 0x1;  // version field
  std::ofstream(tmp.file("flipped.ckpt"), std::ios::binary)
      .write(flipped.data(), static_cast<std::streamsize>(flipped.size()));
  REQUIRE_THROWS_MATCHES(load_checkpoint(tmp.file("flipped.ckpt")), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("version")));

  std::ofstream(tmp.file("trunc.ckpt"), std::ios::binary)
      .write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 64));
  REQUIRE_THROWS_MATCHES(load_checkpoint(tmp.file("trunc.ckpt")), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("truncated")));

  auto magic = bytes;
  magic[0] = 'X';
  std::ofstream(tmp.file("magic.ckpt"), std::ios::binary)
      .write(magic.data(), static_cast<std::streamsize>(magic.size()));
  REQUIRE_THROWS_MATCHES(load_checkpoint(tmp.file("magic.ckpt")), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("magic")));
}

TEST_CASE("latency benchmark orders models by work and reports spread") {
  TransformerConfig big;
  big.n_layers = 2;
  big.n_heads = 4;
  big.d_model = 64;
  big.d_ff = 256;
  big.vocab_size = 32;
  big.max_seq_len = 32;
  auto heavy = build_model<float>(big, 8);
  TransformerConfig small = big;
  small.d_ff = 32;
  small.d_model = 32;
  auto light = build_model<float>(small, 8);

  auto t_heavy = benchmark_latency(heavy, 1, 32, 3, 48);
  auto t_light = benchmark_latency(light, 1, 32, 3, 48);
  REQUIRE(t_light.median_s < t_heavy.median_s);
  REQUIRE(t_heavy.repeats == 3);
  REQUIRE(t_heavy.spread_s >= 0);

  auto single = benchmark_latency(light, 1, 32, 1, 8);
  REQUIRE(single.spread_s == 0.0);

  auto again = benchmark_latency(heavy, 1, 32, 3, 48);
  REQUIRE(std::abs(again.median_s - t_heavy.median_s) <= 0.10 * t_heavy.median_s);

  REQUIRE_THROWS_AS(benchmark_latency(light, 1, 32, 0), ValidationError);
}

TEST_CASE("report JSON and CSV encode identical values") {
  TempDir tmp("prunekit_report_test");
  PruneReport report;
  report.method = "gain";
  report.config_echo = {{"note", "test"}};
  for (uint64_t seed : {1ULL, 2ULL}) {
    RunResult r;
    r.seed = seed;
    r.layers = {{0, 4, 3, 16, 9}, {1, 4, 4, 16, 12}};
    r.pct_attn_removed = 100.0 * (1.0 - 7.0 / 8.0);
    r.pct_ff_removed = 100.0 * (1.0 - 21.0 / 32.0);
    r.params_before = 11111;
    r.params_after = 9999;
    r.flops_before = 222222;
    r.flops_after = 111111;
    r.bytes_before = 44444;
    r.bytes_after = 33333;
    r.latency_before_s = 0.123456;
    r.latency_after_s = 0.098765;
    r.latency_spread_before_s = 0.001;
    r.latency_spread_after_s = 0.002;
    r.metrics_base = {0.91230001, 0.95, 0.93, 0.4567};
    r.metrics_pruned = {0.8, 0.85, 0.82, 0.9876};
    r.metrics_final = {0.9, 0.92, 0.91, 0.5};
    report.runs.push_back(r);
  }
  emit_report(report, "json", tmp.path.string());
  emit_report(report, "csv", tmp.path.string());

  auto j = nlohmann::json::parse(slurp(tmp.file("report.json")));
  REQUIRE(j["runs"].size() == 2);
  REQUIRE(j["runs"][0]["layers"].size() == 2);  // row count == n_layers

  // % removed agrees with the per-layer table within 0.05
  for (const auto& run : j["runs"]) {
    double before = 0, after = 0;
    for (const auto& l : run["layers"]) {
      before += l["heads_before"].get<double>();
      after += l["heads_after"].get<double>();
    }
    double pct = 100.0 * (1.0 - after / before);
    REQUIRE(std::abs(run["pct_attn_removed"].get<double>() - pct) <= 0.05);
  }

  // cross-format compare on the summary columns
  std::ifstream csv(tmp.file("summary.csv"));
  std::string header, line;
  std::getline(csv, header);
  int row = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    size_t pos = 0;
    while (true) {
      size_t comma = line.find(',', pos);
      cells.push_back(line.substr(pos, comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    const auto& run = j["runs"][row];
    REQUIRE(std::stoull(cells[0]) == run["seed"].get<uint64_t>());
    REQUIRE(std::stod(cells[2]) == run["pct_attn_removed"].get<double>());
    REQUIRE(std::stod(cells[3]) == run["pct_ff_removed"].get<double>());
    REQUIRE(std::stoll(cells[4]) == run["params_before"].get<int64_t>());
    REQUIRE(std::stod(cells[10]) == run["latency_before_s"].get<double>());
    REQUIRE(std::stod(cells[12]) == run["metrics_base"]["span_exact_match"].get<double>());
    ++row;
  }
  REQUIRE(row == 2);

  // per-layer table has one row per (seed, layer)
  std::ifstream layers(tmp.file("layers.csv"));
  std::getline(layers, header);
  int layer_rows = 0;
  while (std::getline(layers, line)) ++layer_rows;
  REQUIRE(layer_rows == 4);

  REQUIRE_THROWS_AS(emit_report(report, "yaml", tmp.path.string()), ValidationError);
}

TEST_CASE("pipeline no-op run leaves the model untouched") {
  TempDir tmp("prunekit_pipeline_noop");
  auto cfg = fast_pipeline_config(tmp.path.string());
  auto report = run_pipeline(cfg);
  REQUIRE(report.status == "ok");
  REQUIRE(report.runs.size() == 1);
  const auto& run = report.runs[0];
  REQUIRE(run.pct_attn_removed == 0.0);
  REQUIRE(run.pct_ff_removed == 0.0);
  REQUIRE(run.params_before == run.params_after);
  REQUIRE(run.metrics_pruned.span_exact_match == run.metrics_base.span_exact_match);
  REQUIRE(run.metrics_pruned.mean_loss == run.metrics_base.mean_loss);
  REQUIRE(run.equivalence_max_abs_diff == 0.0);
  REQUIRE(fs::exists(tmp.path / "report.json"));
  REQUIRE(fs::exists(tmp.path / "summary.csv"));
  REQUIRE(fs::exists(tmp.path / "checkpoints" / "final_seed3.ckpt"));
}

TEST_CASE("pipeline reports are byte-identical across reruns") {
  TempDir tmp1("prunekit_pipeline_det1");
  TempDir tmp2("prunekit_pipeline_det2");
  auto cfg1 = fast_pipeline_config(tmp1.path.string());
  cfg1.method = "l0";
  cfg1.gate.lambda_attn = 0.01;
  cfg1.gate.lambda_ff = 0.01;
  cfg1.gate.epochs = 1.0;
  cfg1.continuation.mode = "retrain";
  cfg1.continuation.epochs = 0.5;
  auto cfg2 = cfg1;
  cfg2.paths.out_dir = tmp2.path.string();
  run_pipeline(cfg1);
  run_pipeline(cfg2);
  auto a = slurp(tmp1.file("report.json"));
  auto b = slurp(tmp2.file("report.json"));
  // the config echo embeds out_dir; normalize it before comparing
  auto ja = nlohmann::json::parse(a);
  auto jb = nlohmann::json::parse(b);
  ja["config"]["paths"]["out_dir"] = "";
  jb["config"]["paths"]["out_dir"] = "";
  REQUIRE(ja.dump() == jb.dump());
  REQUIRE(slurp(tmp1.file("summary.csv")) == slurp(tmp2.file("summary.csv")));
}

TEST_CASE("pipeline failure writes a marked report and raises the stage") {
  TempDir tmp("prunekit_pipeline_fail");
  auto cfg = fast_pipeline_config(tmp.path.string());
  cfg.paths.base_checkpoint = tmp.file("nonexistent.ckpt");
  REQUIRE_THROWS_MATCHES(run_pipeline(cfg), StageError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("base-model")));
  auto j = nlohmann::json::parse(slurp(tmp.file("report.json")));
  REQUIRE(j["status"] == "failed");
  REQUIRE(j["failed_stage"] == "base-model");
}

TEST_CASE("pipeline config JSON round trip and validation") {
  PipelineConfig cfg;
  cfg.method = "gain";
  cfg.gate.keep_fraction = 0.6;
  cfg.seeds = {4, 5, 6};
  cfg.rounding_granularity = 8;
  auto j = cfg.to_json();
  auto back = PipelineConfig::from_json(j);
  REQUIRE(back.method == "gain");
  REQUIRE(back.gate.keep_fraction == 0.6);
  REQUIRE(back.seeds == std::vector<uint64_t>{4, 5, 6});
  REQUIRE(back.rounding_granularity == 8);

  PipelineConfig missing;
  missing.method = "random";  // bernoulli_p left unset
  REQUIRE_THROWS_MATCHES(missing.validate(), ValidationError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("bernoulli_p")));
  PipelineConfig l0;
  l0.method = "l0";  // lambdas left unset
  REQUIRE_THROWS_MATCHES(l0.validate(), ValidationError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("lambda")));
  PipelineConfig noseeds;
  noseeds.method = "random";
  noseeds.gate.bernoulli_p = 0.5;
  noseeds.seeds.clear();
  REQUIRE_THROWS_AS(noseeds.validate(), ValidationError);
}
