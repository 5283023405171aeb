#include <catch2/catch_amalgamated.hpp>

#include "prunekit/gates.hpp"
#include "prunekit/surgery.hpp"

using namespace prunekit;

namespace {

TransformerConfig small_config() {
  TransformerConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 32;
  c.d_ff = 24;
  c.vocab_size = 20;
  c.max_seq_len = 12;
  return c;
}

GateMask ones_mask(const Model<float>& m) {
  GateMask mask;
  for (const auto& l : m.layers) {
    mask.attn.emplace_back(l.n_heads, 1.0f);
    mask.ff.emplace_back(l.d_ff, 1.0f);
  }
  return mask;
}

bool models_identical(const Model<float>& a, const Model<float>& b) {
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

// parameters that live in per-head slices (everything but bo)
int64_t attention_slice_params(const Model<float>& m, int layer) {
  const auto& l = m.layers[layer];
  return static_cast<int64_t>(l.wq.numel() + l.bq.numel() + l.wk.numel() + l.bk.numel() +
                              l.wv.numel() + l.bv.numel() + l.wo.numel());
}

int64_t ff_slice_params(const Model<float>& m, int layer) {
  const auto& l = m.layers[layer];
  return static_cast<int64_t>(l.w1.numel() + l.b1.numel() + l.w2.numel());
}

}  // namespace

TEST_CASE("surgery with an all-ones mask changes nothing, twice") {
  auto m = build_model<float>(small_config(), 31);
  auto mask = ones_mask(m);
  auto once = prune_model(m, mask);
  REQUIRE(models_identical(m, once));
  auto twice = prune_model(once, mask);
  REQUIRE(models_identical(m, twice));
}

TEST_CASE("removing one of four heads scales layer attention params by 3/4") {
  auto m = build_model<float>(small_config(), 32);
  auto mask = ones_mask(m);
  mask.attn[0][1] = 0.0f;
  auto pruned = prune_attention(m, mask.attn);
  REQUIRE(attention_slice_params(pruned, 0) * 4 == attention_slice_params(m, 0) * 3);
  REQUIRE(attention_slice_params(pruned, 1) == attention_slice_params(m, 1));
  REQUIRE(pruned.layers[0].n_heads == 3);
}

TEST_CASE("halving ff units halves the ff slice params exactly") {
  auto m = build_model<float>(small_config(), 33);
  auto mask = ones_mask(m);
  for (auto& l : mask.ff)
    for (size_t u = 0; u < l.size(); u += 2) l[u] = 0.0f;
  auto pruned = prune_feedforward(m, mask.ff);
  for (int l = 0; l < 2; ++l) {
    REQUIRE(ff_slice_params(pruned, l) * 2 == ff_slice_params(m, l));
    REQUIRE(pruned.layers[l].d_ff == 12);
    // output bias survives untouched
    REQUIRE(pruned.layers[l].b2.numel() == static_cast<size_t>(m.config.d_model));
  }
}

TEST_CASE("pruned model matches the gated forward") {
  auto m = build_model<float>(small_config(), 34);
  auto mask = random_gates(m.heads_per_layer(), m.ff_per_layer(), 0.6, 77);
  auto pruned = prune_model(m, mask);
  REQUIRE(verify_equivalence(m, mask, pruned, 20, 55) <= 1e-5);
}

TEST_CASE("surgery order does not matter and sizes equal popcounts") {
  auto m = build_model<float>(small_config(), 35);
  auto mask = random_gates(m.heads_per_layer(), m.ff_per_layer(), 0.5, 78);
  auto ab = prune_feedforward(prune_attention(m, mask.attn), mask.ff);
  auto ba = prune_attention(prune_feedforward(m, mask.ff), mask.attn);
  REQUIRE(models_identical(ab, ba));
  for (size_t l = 0; l < ab.layers.size(); ++l) {
    int heads = 0, ff = 0;
    for (float v : mask.attn[l]) heads += v == 1.0f;
    for (float v : mask.ff[l]) ff += v == 1.0f;
    REQUIRE(ab.layers[l].n_heads == heads);
    REQUIRE(ab.layers[l].d_ff == ff);
  }
}

TEST_CASE("pruning strictly reduces params and flops") {
  auto m = build_model<float>(small_config(), 36);
  auto mask = ones_mask(m);
  mask.ff[1][3] = 0.0f;
  auto pruned = prune_model(m, mask);
  REQUIRE(count_params(pruned) < count_params(m));
  REQUIRE(count_flops(pruned, 8, 2) < count_flops(m, 8, 2));
}

TEST_CASE("surgery rejects bad masks") {
  auto m = build_model<float>(small_config(), 37);
  auto mask = ones_mask(m);
  mask.attn[0][0] = 0.5f;
  REQUIRE_THROWS_AS(prune_attention(m, mask.attn), ContractError);

  auto empty = ones_mask(m);
  std::fill(empty.ff[1].begin(), empty.ff[1].end(), 0.0f);
  REQUIRE_THROWS_AS(prune_feedforward(m, empty.ff), ContractError);

  auto ragged = ones_mask(m);
  ragged.attn[0].pop_back();
  REQUIRE_THROWS_AS(prune_attention(m, ragged.attn), ContractError);
}

TEST_CASE("round_sizes follows the nearest-multiple rule in score order") {
  ImportanceScores scores;
  scores.attn = {{}};
  scores.ff.emplace_back();
  GateMask mask;
  mask.attn = {{}};
  mask.ff.emplace_back();
  Rng rng(9);
  auto& sc = scores.ff[0];
  auto& mk = mask.ff[0];
  sc.resize(64);
  mk.resize(64, 0.0f);
  for (int i = 0; i < 64; ++i) sc[i] = rng.uniform();
  // retain the top 13 by score
  std::vector<int> order(64);
  for (int i = 0; i < 64; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) { return sc[a] > sc[b]; });
  for (int i = 0; i < 13; ++i) mk[order[i]] = 1.0f;

  auto same = round_sizes(mask, 1, scores);
  REQUIRE(same.ff[0] == mask.ff[0]);

  auto rounded = round_sizes(mask, 8, scores);
  int kept = 0;
  for (float v : rounded.ff[0]) kept += v == 1.0f;
  REQUIRE(kept == 16);
  // the three re-added are the highest-scoring previously pruned units
  for (int i = 13; i < 16; ++i) REQUIRE(rounded.ff[0][order[i]] == 1.0f);
  for (int i = 0; i < 13; ++i) REQUIRE(rounded.ff[0][order[i]] == 1.0f);

  // already a multiple: untouched
  for (int i = 13; i < 16; ++i) mk[order[i]] = 1.0f;
  auto stable = round_sizes(mask, 8, scores);
  REQUIRE(stable.ff[0] == mask.ff[0]);

  REQUIRE_THROWS_AS(round_sizes(mask, 0, scores), ValidationError);
}

TEST_CASE("verify_equivalence flags a corrupted pruned model") {
  auto m = build_model<float>(small_config(), 38);
  auto mask = ones_mask(m);
  mask.attn[0][2] = 0.0f;
  mask.ff[0][5] = 0.0f;
  auto pruned = prune_model(m, mask);
  REQUIRE(verify_equivalence(m, mask, pruned, 5, 91) == 0.0);  // deletion of exact zeros

  auto corrupted = pruned.clone();
  corrupted.layers[1].w2.data_mut()[7] += 1.0f;
  REQUIRE(verify_equivalence(m, mask, corrupted, 5, 91) > 1e-3);

  // inconsistent shapes violate the contract
  auto wrong = prune_model(m, ones_mask(m));
  REQUIRE_THROWS_AS(verify_equivalence(m, mask, wrong, 2, 91), ContractError);
}

TEST_CASE("retention records reflect surgery") {
  auto m = build_model<float>(small_config(), 39);
  auto mask = ones_mask(m);
  mask.attn[1][0] = 0.0f;
  mask.ff[0][2] = mask.ff[0][9] = 0.0f;
  auto pruned = prune_model(m, mask);
  auto records = retention_records(m, pruned);
  REQUIRE(records.size() == 2);
  REQUIRE(records[0].layer == 0);
  REQUIRE(records[0].heads_before == 4);
  REQUIRE(records[0].heads_after == 4);
  REQUIRE(records[0].ff_before == 24);
  REQUIRE(records[0].ff_after == 22);
  REQUIRE(records[1].heads_after == 3);
}
