#pragma once

#include <algorithm>
#include <chrono>
#include <vector>

#include "prunekit/transformer.hpp"

namespace prunekit {

struct LatencyResult {
  double median_s = 0;
  double spread_s = 0;  // max - min over the timed repeats
  int repeats = 0;
};

// Wall-clock median of `repeats` timed passes over a fixed synthetic workload
// of n_examples forward evaluations at the given batch size, after one untimed
// warmup pass. Runs single-threaded; the workload tokens depend only on seed.
inline LatencyResult benchmark_latency(const Model<float>& m, int batch_size, int seq_len,
                                       int repeats, int n_examples = 128, uint64_t seed = 42) {
  if (repeats < 1) throw ValidationError("benchmark_latency: repeats must be >= 1");
  if (batch_size < 1) throw ValidationError("benchmark_latency: batch_size must be >= 1");
  if (seq_len < 1 || seq_len > m.config.max_seq_len)
    throw ValidationError("benchmark_latency: seq_len must be in [1, max_seq_len]");
  Rng rng(seed, 21);
  std::vector<QaBatch> workload;
  int remaining = n_examples;
  while (remaining > 0) {
    int b = std::min(batch_size, remaining);
    QaBatch batch;
    batch.batch = b;
    batch.seq = seq_len;
    batch.token_ids.resize(static_cast<size_t>(b) * seq_len);
    for (auto& t : batch.token_ids) t = rng.uniform_int(0, m.config.vocab_size - 1);
    batch.start_targets.assign(b, 0);
    batch.end_targets.assign(b, 0);
    workload.push_back(std::move(batch));
    remaining -= b;
  }

  NoGradGuard ng;
  auto run_pass = [&] {
    double sink = 0;
    for (const auto& batch : workload) {
      auto logits = forward(m, batch);
      sink += static_cast<double>(logits.start.data()[0]);
    }
    return sink;
  };
  volatile double keep = run_pass();  // warmup, result kept alive
  (void)keep;

  std::vector<double> times;
  times.reserve(repeats);
  for (int r = 0; r < repeats; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    keep = run_pass();
    auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  LatencyResult out;
  out.repeats = repeats;
  out.median_s = times.size() % 2 ? times[times.size() / 2]
                                  : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);
  out.spread_s = times.back() - times.front();
  return out;
}

}  // namespace prunekit
