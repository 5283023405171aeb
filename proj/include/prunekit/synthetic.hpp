#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunekit/transformer.hpp"

namespace prunekit {

// Key-token span lookup task: the question names a key token, the passage
// hides one span opened by that key and closed by its paired close token.
// Answering requires reading the key at position 1 and locating the matching
// markers in the passage. A configurable fraction of examples has no span for
// the asked key (both targets at position 0), with a distractor span present
// so absence actually has to be verified.
struct SyntheticTaskConfig {
  int vocab_size = 32;
  int seq_len = 24;
  int n_train = 2048;
  int n_dev = 512;
  std::string pattern = "key-span";
  double noise_rate = 0.0;
  double no_answer_fraction = 0.1;
  uint64_t seed = 1234;

  void validate() const {
    if (seq_len < 4) throw ValidationError("SyntheticTaskConfig.seq_len: must be >= 4");
    if (n_train < 1) throw ValidationError("SyntheticTaskConfig.n_train: must be >= 1");
    if (n_dev < 1) throw ValidationError("SyntheticTaskConfig.n_dev: must be >= 1");
    if (pattern != "key-span")
      throw ValidationError("SyntheticTaskConfig.pattern: unknown pattern '" + pattern + "'");
    if (vocab_size < 11)
      throw ValidationError("SyntheticTaskConfig.vocab_size: key-span needs >= 11 tokens");
    if (noise_rate < 0 || noise_rate > 1)
      throw ValidationError("SyntheticTaskConfig.noise_rate: must be in [0, 1]");
    if (no_answer_fraction < 0 || no_answer_fraction > 1)
      throw ValidationError("SyntheticTaskConfig.no_answer_fraction: must be in [0, 1]");
    if (seq_len - 3 < 2)
      throw ValidationError("SyntheticTaskConfig.seq_len: span cannot fit, need >= 5");
  }
};

struct SyntheticTask {
  Dataset train;
  Dataset dev;
};

namespace detail {

// vocabulary layout: 0 CLS, 1 SEP, then equal key/close alphabets, fillers last
struct KeySpanVocab {
  int n_keys;
  int key0 = 2;
  int close0;
  int filler0;
  int vocab;

  explicit KeySpanVocab(int vocab_size) : vocab(vocab_size) {
    n_keys = (vocab_size - 2) / 3;
    close0 = key0 + n_keys;
    filler0 = close0 + n_keys;
  }
  int key(int i) const { return key0 + i; }
  int close_of(int key_token) const { return key_token + n_keys; }
  int n_fillers() const { return vocab - filler0; }
};

inline QaExample make_key_span_example(const SyntheticTaskConfig& cfg, const KeySpanVocab& v,
                                       Rng& rng) {
  QaExample ex;
  ex.tokens.assign(cfg.seq_len, 0);
  int passage0 = 3;
  int passage_len = cfg.seq_len - passage0;
  int key = v.key(rng.uniform_int(0, v.n_keys - 1));
  ex.tokens[0] = 0;  // CLS, also the no-answer position
  ex.tokens[1] = key;
  ex.tokens[2] = 1;  // SEP
  for (int i = passage0; i < cfg.seq_len; ++i)
    ex.tokens[i] = v.filler0 + rng.uniform_int(0, v.n_fillers() - 1);

  bool answerable = !rng.bernoulli(cfg.no_answer_fraction);
  int span_hi = std::min(4, passage_len);
  std::vector<bool> used(cfg.seq_len, false);

  if (answerable) {
    int len = rng.uniform_int(2, span_hi);
    int start = rng.uniform_int(passage0, cfg.seq_len - len);
    ex.tokens[start] = key;
    ex.tokens[start + len - 1] = v.close_of(key);
    for (int i = start; i < start + len; ++i) used[i] = true;
    ex.start = start;
    ex.end = start + len - 1;
  } else {
    ex.start = 0;
    ex.end = 0;
  }

  // distractor span with a different key, placed disjointly when room allows
  if (v.n_keys > 1) {
    int other = key;
    while (other == key) other = v.key(rng.uniform_int(0, v.n_keys - 1));
    for (int attempt = 0; attempt < 16; ++attempt) {
      int start = rng.uniform_int(passage0, cfg.seq_len - 2);
      if (used[start] || used[start + 1]) continue;
      ex.tokens[start] = other;
      ex.tokens[start + 1] = v.close_of(other);
      break;
    }
  }

  if (cfg.noise_rate > 0)
    for (int i = passage0; i < cfg.seq_len; ++i)
      if (!used[i] && rng.bernoulli(cfg.noise_rate))
        ex.tokens[i] = rng.uniform_int(0, cfg.vocab_size - 1);
  return ex;
}

}  // namespace detail

inline SyntheticTask generate_synthetic_task(const SyntheticTaskConfig& cfg) {
  cfg.validate();
  detail::KeySpanVocab vocab(cfg.vocab_size);
  SyntheticTask task;
  Rng train_rng(cfg.seed, 11);
  Rng dev_rng(cfg.seed, 12);
  task.train.reserve(cfg.n_train);
  for (int i = 0; i < cfg.n_train; ++i)
    task.train.push_back(detail::make_key_span_example(cfg, vocab, train_rng));
  task.dev.reserve(cfg.n_dev);
  for (int i = 0; i < cfg.n_dev; ++i)
    task.dev.push_back(detail::make_key_span_example(cfg, vocab, dev_rng));
  return task;
}

// JSON-lines dataset format: {"tokens": [int, ...], "start": int, "end": int}
inline void write_jsonl(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw IoError("write_jsonl: cannot open '" + path + "' for writing");
  for (const auto& ex : data) {
    nlohmann::json j;
    j["tokens"] = ex.tokens;
    j["start"] = ex.start;
    j["end"] = ex.end;
    out << j.dump() << "\n";
  }
}

inline Dataset read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_jsonl: cannot open '" + path + "'");
  Dataset data;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("read_jsonl: line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("tokens") || !j["tokens"].is_array())
      throw IoError("read_jsonl: line " + std::to_string(lineno) + ": missing 'tokens'");
    if (!j.contains("start") || !j.contains("end"))
      throw IoError("read_jsonl: line " + std::to_string(lineno) + ": missing 'start'/'end'");
    QaExample ex;
    ex.tokens = j["tokens"].get<std::vector<int>>();
    ex.start = j["start"].get<int>();
    ex.end = j["end"].get<int>();
    if (ex.start < 0 || ex.end < 0 || ex.start >= static_cast<int>(ex.tokens.size()) ||
        ex.end >= static_cast<int>(ex.tokens.size()))
      throw IoError("read_jsonl: line " + std::to_string(lineno) + ": target outside sequence");
    data.push_back(std::move(ex));
  }
  return data;
}

}  // namespace prunekit
