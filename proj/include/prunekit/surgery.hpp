#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "prunekit/transformer.hpp"

namespace prunekit {

// Per-layer size change emitted by surgery, the unit record of prune reports.
struct LayerRetention {
  int layer = 0;
  int heads_before = 0;
  int heads_after = 0;
  int ff_before = 0;
  int ff_after = 0;
};

namespace detail {

inline void check_binary_mask(const std::vector<std::vector<float>>& mask, size_t n_layers,
                              const char* family) {
  if (mask.size() != n_layers)
    throw ContractError(std::string("prune: ") + family + " mask covers " +
                        std::to_string(mask.size()) + " layers, model has " +
                        std::to_string(n_layers));
  for (size_t l = 0; l < mask.size(); ++l) {
    int kept = 0;
    for (float v : mask[l]) {
      if (v != 0.0f && v != 1.0f)
        throw ContractError(std::string("prune: ") + family + " mask layer " + std::to_string(l) +
                            " has non-binary entry " + std::to_string(v));
      kept += v == 1.0f;
    }
    if (kept == 0)
      throw ContractError(std::string("prune: ") + family + " mask layer " + std::to_string(l) +
                          " retains no units (degenerate guard violated)");
  }
}

// Keep the column blocks of w ([rows, n_blocks*block]) whose mask entry is 1.
template <typename T>
Tensor<T> keep_column_blocks(const Tensor<T>& w, const std::vector<float>& mask, int block) {
  int rows = w.shape()[0];
  int n_blocks = static_cast<int>(mask.size());
  int kept = 0;
  for (float v : mask) kept += v == 1.0f;
  std::vector<T> out(static_cast<size_t>(rows) * kept * block);
  auto src = w.data();
  int src_cols = n_blocks * block;
  for (int r = 0; r < rows; ++r) {
    T* dst = out.data() + static_cast<size_t>(r) * kept * block;
    int c = 0;
    for (int b = 0; b < n_blocks; ++b) {
      if (mask[b] != 1.0f) continue;
      const T* s = src.data() + static_cast<size_t>(r) * src_cols + static_cast<size_t>(b) * block;
      std::copy_n(s, block, dst + static_cast<size_t>(c) * block);
      ++c;
    }
  }
  return Tensor<T>::from_data({rows, kept * block}, std::move(out), w.requires_grad());
}

// Keep the row blocks of w ([n_blocks*block, cols]) whose mask entry is 1.
template <typename T>
Tensor<T> keep_row_blocks(const Tensor<T>& w, const std::vector<float>& mask, int block) {
  int cols = w.shape()[1];
  int n_blocks = static_cast<int>(mask.size());
  int kept = 0;
  for (float v : mask) kept += v == 1.0f;
  std::vector<T> out(static_cast<size_t>(kept) * block * cols);
  auto src = w.data();
  int r = 0;
  for (int b = 0; b < n_blocks; ++b) {
    if (mask[b] != 1.0f) continue;
    std::copy_n(src.data() + static_cast<size_t>(b) * block * cols, static_cast<size_t>(block) * cols,
                out.data() + static_cast<size_t>(r) * block * cols);
    ++r;
  }
  return Tensor<T>::from_data({kept * block, cols}, std::move(out), w.requires_grad());
}

// Keep block-sized chunks of a bias vector whose mask entry is 1.
template <typename T>
Tensor<T> keep_vector_blocks(const Tensor<T>& v, const std::vector<float>& mask, int block) {
  int kept = 0;
  for (float m : mask) kept += m == 1.0f;
  std::vector<T> out;
  out.reserve(static_cast<size_t>(kept) * block);
  auto src = v.data();
  for (size_t b = 0; b < mask.size(); ++b)
    if (mask[b] == 1.0f)
      out.insert(out.end(), src.begin() + b * block, src.begin() + (b + 1) * block);
  return Tensor<T>::from_data({kept * block}, std::move(out), v.requires_grad());
}

}  // namespace detail

// Physically deletes gated-off attention heads: per-head q/k/v projection
// columns and output-projection rows. The result needs no attention mask.
template <typename T>
Model<T> prune_attention(const Model<T>& model, const std::vector<std::vector<float>>& mask_attn) {
  detail::check_binary_mask(mask_attn, model.layers.size(), "attn");
  for (size_t l = 0; l < model.layers.size(); ++l)
    if (static_cast<int>(mask_attn[l].size()) != model.layers[l].n_heads)
      throw ContractError("prune: attn mask layer " + std::to_string(l) + " has " +
                          std::to_string(mask_attn[l].size()) + " entries, model has " +
                          std::to_string(model.layers[l].n_heads) + " heads");
  Model<T> out = model.clone();
  int dh = model.head_dim;
  for (size_t l = 0; l < out.layers.size(); ++l) {
    const auto& mask = mask_attn[l];
    auto& layer = out.layers[l];
    int kept = 0;
    for (float v : mask) kept += v == 1.0f;
    if (kept == layer.n_heads) continue;
    layer.wq = detail::keep_column_blocks(layer.wq, mask, dh);
    layer.wk = detail::keep_column_blocks(layer.wk, mask, dh);
    layer.wv = detail::keep_column_blocks(layer.wv, mask, dh);
    layer.bq = detail::keep_vector_blocks(layer.bq, mask, dh);
    layer.bk = detail::keep_vector_blocks(layer.bk, mask, dh);
    layer.bv = detail::keep_vector_blocks(layer.bv, mask, dh);
    layer.wo = detail::keep_row_blocks(layer.wo, mask, dh);
    layer.n_heads = kept;
  }
  return out;
}

// Physically deletes gated-off feed-forward activations: first-map columns
// and bias entries, second-map rows. The output bias stays in model space.
template <typename T>
Model<T> prune_feedforward(const Model<T>& model, const std::vector<std::vector<float>>& mask_ff) {
  detail::check_binary_mask(mask_ff, model.layers.size(), "ff");
  for (size_t l = 0; l < model.layers.size(); ++l)
    if (static_cast<int>(mask_ff[l].size()) != model.layers[l].d_ff)
      throw ContractError("prune: ff mask layer " + std::to_string(l) + " has " +
                          std::to_string(mask_ff[l].size()) + " entries, model has " +
                          std::to_string(model.layers[l].d_ff) + " units");
  Model<T> out = model.clone();
  for (size_t l = 0; l < out.layers.size(); ++l) {
    const auto& mask = mask_ff[l];
    auto& layer = out.layers[l];
    int kept = 0;
    for (float v : mask) kept += v == 1.0f;
    if (kept == layer.d_ff) continue;
    layer.w1 = detail::keep_column_blocks(layer.w1, mask, 1);
    layer.b1 = detail::keep_vector_blocks(layer.b1, mask, 1);
    layer.w2 = detail::keep_row_blocks(layer.w2, mask, 1);
    layer.d_ff = kept;
  }
  return out;
}

template <typename T>
Model<T> prune_model(const Model<T>& model, const GateMask& mask) {
  return prune_feedforward(prune_attention(model, mask.attn), mask.ff);
}

template <typename T>
std::vector<LayerRetention> retention_records(const Model<T>& before, const Model<T>& after) {
  std::vector<LayerRetention> out;
  for (size_t l = 0; l < before.layers.size(); ++l)
    out.push_back({static_cast<int>(l), before.layers[l].n_heads, after.layers[l].n_heads,
                   before.layers[l].d_ff, after.layers[l].d_ff});
  return out;
}

namespace detail {

inline void round_family(std::vector<std::vector<float>>& mask,
                         const std::vector<std::vector<double>>& scores, int granularity) {
  for (size_t l = 0; l < mask.size(); ++l) {
    int units = static_cast<int>(mask[l].size());
    int count = 0;
    for (float v : mask[l]) count += v == 1.0f;
    int64_t target = std::llround(static_cast<double>(count) / granularity) *
                     static_cast<int64_t>(granularity);
    if (target < granularity) target = granularity;
    if (target > units) target = units >= granularity ? (units / granularity) * granularity : units;
    if (target == count) continue;
    if (target > count) {
      // re-add the highest-scoring pruned units
      std::vector<std::tuple<double, int>> pruned;
      for (int u = 0; u < units; ++u)
        if (mask[l][u] == 0.0f) pruned.emplace_back(-scores[l][u], u);
      std::sort(pruned.begin(), pruned.end());
      for (int64_t i = 0; i < target - count; ++i) mask[l][std::get<1>(pruned[i])] = 1.0f;
    } else {
      // drop the lowest-scoring retained units
      std::vector<std::tuple<double, int>> kept;
      for (int u = 0; u < units; ++u)
        if (mask[l][u] == 1.0f) kept.emplace_back(scores[l][u], u);
      std::sort(kept.begin(), kept.end());
      for (int64_t i = 0; i < count - target; ++i) mask[l][std::get<1>(kept[i])] = 0.0f;
    }
  }
}

}  // namespace detail

// Rounds each layer's retained count to the nearest multiple of `granularity`
// (at least one multiple, capped at the layer size), adding back or dropping
// units in score order. Matrices then land on hardware-friendly sizes.
inline GateMask round_sizes(const GateMask& mask, int granularity,
                            const ImportanceScores& scores) {
  if (granularity < 1)
    throw ValidationError("round_sizes: granularity must be >= 1, got " +
                          std::to_string(granularity));
  GateMask out = mask;
  if (granularity == 1) return out;
  detail::round_family(out.attn, scores.attn, granularity);
  detail::round_family(out.ff, scores.ff, granularity);
  return out;
}

// Runs random batches through the gated original and the pruned model and
// returns the max absolute logit difference; the guard on §surgery correctness.
template <typename T>
double verify_equivalence(const Model<T>& original, const GateMask& mask, const Model<T>& pruned,
                          int trials, uint64_t seed) {
  for (size_t l = 0; l < original.layers.size(); ++l) {
    int heads = 0, ff = 0;
    for (float v : mask.attn[l]) heads += v == 1.0f;
    for (float v : mask.ff[l]) ff += v == 1.0f;
    if (heads != pruned.layers[l].n_heads || ff != pruned.layers[l].d_ff)
      throw ContractError("verify_equivalence: pruned sizes at layer " + std::to_string(l) +
                          " do not match the mask popcounts");
  }
  Rng rng(seed, 3);
  int seq = std::min(original.config.max_seq_len, 12);
  double worst = 0;
  NoGradGuard ng;
  for (int t = 0; t < trials; ++t) {
    QaBatch batch;
    batch.batch = 2;
    batch.seq = seq;
    for (int i = 0; i < batch.batch * seq; ++i)
      batch.token_ids.push_back(rng.uniform_int(0, original.config.vocab_size - 1));
    for (int b = 0; b < batch.batch; ++b) {
      batch.start_targets.push_back(0);
      batch.end_targets.push_back(0);
    }
    auto gated = forward(original, batch, mask);
    auto lean = forward(pruned, batch);
    for (size_t i = 0; i < gated.start.numel(); ++i) {
      worst = std::max(worst,
                       std::abs(static_cast<double>(gated.start.data()[i]) - lean.start.data()[i]));
      worst = std::max(worst,
                       std::abs(static_cast<double>(gated.end.data()[i]) - lean.end.data()[i]));
    }
  }
  return worst;
}

}  // namespace prunekit
