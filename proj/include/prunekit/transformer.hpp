#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prunekit/tensor.hpp"

namespace prunekit {

enum class Activation { kRelu, kGelu };

inline std::string activation_name(Activation a) {
  return a == Activation::kRelu ? "relu" : "gelu";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "gelu") return Activation::kGelu;
  throw ValidationError("activation: must be 'relu' or 'gelu', got '" + s + "'");
}

struct TransformerConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 32;
  int d_ff = 64;
  int vocab_size = 32;
  int max_seq_len = 64;
  Activation activation = Activation::kGelu;

  void validate() const {
    auto positive = [](int v, const char* field) {
      if (v < 1) throw ValidationError(std::string("TransformerConfig.") + field + ": must be >= 1");
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_model, "d_model");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (d_model % n_heads != 0)
      throw ValidationError("TransformerConfig.d_model: " + std::to_string(d_model) +
                            " not divisible by n_heads " + std::to_string(n_heads));
  }
};

// Per-layer binary (or soft, in [0,1]) gate values over attention heads and
// feed-forward activations.
struct GateMask {
  std::vector<std::vector<float>> attn;
  std::vector<std::vector<float>> ff;
};

struct QaExample {
  std::vector<int> tokens;
  int start = 0;
  int end = 0;
};

using Dataset = std::vector<QaExample>;

struct QaBatch {
  std::vector<int> token_ids;  // row-major [batch, seq]
  std::vector<int> start_targets;
  std::vector<int> end_targets;
  int batch = 0;
  int seq = 0;

  static QaBatch from_examples(std::span<const QaExample> examples, int vocab_size) {
    if (examples.empty()) throw ContractError("QaBatch: empty example list");
    QaBatch b;
    b.batch = static_cast<int>(examples.size());
    b.seq = static_cast<int>(examples[0].tokens.size());
    b.token_ids.reserve(static_cast<size_t>(b.batch) * b.seq);
    for (const auto& ex : examples) {
      if (static_cast<int>(ex.tokens.size()) != b.seq)
        throw ShapeError("QaBatch: ragged example lengths");
      if (ex.start < 0 || ex.start >= b.seq || ex.end < 0 || ex.end >= b.seq)
        throw ValidationError("QaBatch: target outside sequence");
      for (int t : ex.tokens) {
        if (t < 0 || t >= vocab_size)
          throw ValidationError("QaBatch: token id " + std::to_string(t) + " outside vocab " +
                                std::to_string(vocab_size));
        b.token_ids.push_back(t);
      }
      b.start_targets.push_back(ex.start);
      b.end_targets.push_back(ex.end);
    }
    return b;
  }
};

template <typename T>
struct LayerWeights {
  Tensor<T> wq, bq, wk, bk, wv, bv;  // [E, H_l*Dh] projections with per-head column slices
  Tensor<T> wo, bo;                  // [H_l*Dh, E] output projection, per-head row slices
  Tensor<T> w1, b1;                  // [E, F_l]
  Tensor<T> w2, b2;                  // [F_l, E]
  Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  int n_heads = 0;  // heads actually present (may differ per layer after surgery)
  int d_ff = 0;     // ff units actually present
};

template <typename T = float>
struct Model {
  TransformerConfig config;  // construction-time sizes
  int head_dim = 0;          // fixed at build; surgery removes whole heads
  Tensor<T> token_embedding;
  Tensor<T> position_embedding;
  Tensor<T> qa_head;  // [d_model, 2] start/end projection
  std::vector<LayerWeights<T>> layers;

  std::vector<int> heads_per_layer() const {
    std::vector<int> v;
    for (const auto& l : layers) v.push_back(l.n_heads);
    return v;
  }
  std::vector<int> ff_per_layer() const {
    std::vector<int> v;
    for (const auto& l : layers) v.push_back(l.d_ff);
    return v;
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out{token_embedding, position_embedding, qa_head};
    for (auto& l : layers)
      for (auto* t : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.w1, &l.b1, &l.w2,
                      &l.b2, &l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias})
      out.push_back(*t);
    return out;
  }
  std::vector<Tensor<T>> parameters() const {
    return const_cast<Model*>(this)->parameters();
  }

  void set_trainable(bool trainable) {
    for (auto& p : parameters()) p.node()->requires_grad = trainable;
  }

  bool frozen() const {
    for (const auto& p : parameters())
      if (p.requires_grad()) return false;
    return true;
  }

  Model clone() const {
    Model m;
    m.config = config;
    m.head_dim = head_dim;
    m.token_embedding = token_embedding.clone();
    m.position_embedding = position_embedding.clone();
    m.qa_head = qa_head.clone();
    m.layers.reserve(layers.size());
    for (const auto& l : layers) {
      LayerWeights<T> c;
      c.wq = l.wq.clone(); c.bq = l.bq.clone();
      c.wk = l.wk.clone(); c.bk = l.bk.clone();
      c.wv = l.wv.clone(); c.bv = l.bv.clone();
      c.wo = l.wo.clone(); c.bo = l.bo.clone();
      c.w1 = l.w1.clone(); c.b1 = l.b1.clone();
      c.w2 = l.w2.clone(); c.b2 = l.b2.clone();
      c.ln1_gain = l.ln1_gain.clone(); c.ln1_bias = l.ln1_bias.clone();
      c.ln2_gain = l.ln2_gain.clone(); c.ln2_bias = l.ln2_bias.clone();
      c.n_heads = l.n_heads;
      c.d_ff = l.d_ff;
      m.layers.push_back(std::move(c));
    }
    return m;
  }
};

inline constexpr double kInitStd = 0.02;

template <typename T = float>
Model<T> build_model(const TransformerConfig& config, uint64_t seed) {
  config.validate();
  Model<T> m;
  m.config = config;
  m.head_dim = config.d_model / config.n_heads;
  Rng rng(seed, /*stream=*/17);
  const T std_ = static_cast<T>(kInitStd);
  int e = config.d_model, f = config.d_ff, hw = config.d_model;  // hw = n_heads * head_dim
  m.token_embedding = Tensor<T>::randn({config.vocab_size, e}, rng, std_, true);
  m.position_embedding = Tensor<T>::randn({config.max_seq_len, e}, rng, std_, true);
  m.qa_head = Tensor<T>::randn({e, 2}, rng, std_, true);
  m.layers.resize(config.n_layers);
  for (auto& l : m.layers) {
    l.n_heads = config.n_heads;
    l.d_ff = f;
    l.wq = Tensor<T>::randn({e, hw}, rng, std_, true);
    l.bq = Tensor<T>::zeros({hw}, true);
    l.wk = Tensor<T>::randn({e, hw}, rng, std_, true);
    l.bk = Tensor<T>::zeros({hw}, true);
    l.wv = Tensor<T>::randn({e, hw}, rng, std_, true);
    l.bv = Tensor<T>::zeros({hw}, true);
    l.wo = Tensor<T>::randn({hw, e}, rng, std_, true);
    l.bo = Tensor<T>::zeros({e}, true);
    l.w1 = Tensor<T>::randn({e, f}, rng, std_, true);
    l.b1 = Tensor<T>::zeros({f}, true);
    l.w2 = Tensor<T>::randn({f, e}, rng, std_, true);
    l.b2 = Tensor<T>::zeros({e}, true);
    l.ln1_gain = Tensor<T>::full({e}, T(1), true);
    l.ln1_bias = Tensor<T>::zeros({e}, true);
    l.ln2_gain = Tensor<T>::full({e}, T(1), true);
    l.ln2_bias = Tensor<T>::zeros({e}, true);
  }
  return m;
}

// Differentiable per-layer gate tensors; an empty vector means that family is
// ungated. Shapes are [H_l] / [F_l], or [B, H_l] / [B, F_l] for per-example gates.
template <typename T>
struct GateTensors {
  std::vector<Tensor<T>> attn;
  std::vector<Tensor<T>> ff;
};

template <typename T>
struct QaLogits {
  Tensor<T> start;  // [batch, seq]
  Tensor<T> end;    // [batch, seq]
};

namespace detail {

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

template <typename T>
void check_gate_shape(const Tensor<T>& gate, int units, int batch, int layer, const char* family) {
  const auto& s = gate.shape();
  bool ok = (s.size() == 1 && s[0] == units) ||
            (s.size() == 2 && s[0] == batch && s[1] == units);
  if (!ok)
    throw ShapeError(std::string("forward: ") + family + " gate shape " + shape_str(s) +
                     " does not match layer " + std::to_string(layer) + " with " +
                     std::to_string(units) + " units");
}

}  // namespace detail

// Attention sublayer output before the residual add: gated per-head context
// through the output projection.
template <typename T>
Tensor<T> attention_sublayer(const Model<T>& m, int layer, const Tensor<T>& x, int batch, int seq,
                             const Tensor<T>* gate = nullptr) {
  const auto& l = m.layers[layer];
  auto q = detail::linear(x, l.wq, l.bq);
  auto k = detail::linear(x, l.wk, l.bk);
  auto v = detail::linear(x, l.wv, l.bv);
  auto ctx = attention(q, k, v, batch, seq, l.n_heads);
  if (gate) {
    detail::check_gate_shape(*gate, l.n_heads, batch, layer, "attn");
    int groups = gate->shape().size() == 2 ? gate->shape()[0] : 1;
    ctx = mul(ctx, expand_gate(*gate, batch * seq / groups, m.head_dim));
  }
  return detail::linear(ctx, l.wo, l.bo);
}

// Feed-forward sublayer output before the residual add: gate multiplies the
// post-activation intermediate values.
template <typename T>
Tensor<T> ff_sublayer(const Model<T>& m, int layer, const Tensor<T>& x, int batch, int seq,
                      const Tensor<T>* gate = nullptr) {
  const auto& l = m.layers[layer];
  auto h = detail::linear(x, l.w1, l.b1);
  auto a = m.config.activation == Activation::kRelu ? relu(h) : gelu(h);
  if (gate) {
    detail::check_gate_shape(*gate, l.d_ff, batch, layer, "ff");
    if (gate->shape().size() == 2)
      a = mul(a, expand_gate(*gate, seq, 1));
    else
      a = mul(a, *gate);
  }
  return detail::linear(a, l.w2, l.b2);
}

template <typename T>
QaLogits<T> forward_gated(const Model<T>& m, const QaBatch& batch, const GateTensors<T>& gates) {
  int n_layers = static_cast<int>(m.layers.size());
  if (!gates.attn.empty() && static_cast<int>(gates.attn.size()) != n_layers)
    throw ShapeError("forward: attn gates cover " + std::to_string(gates.attn.size()) +
                     " layers, model has " + std::to_string(n_layers));
  if (!gates.ff.empty() && static_cast<int>(gates.ff.size()) != n_layers)
    throw ShapeError("forward: ff gates cover " + std::to_string(gates.ff.size()) +
                     " layers, model has " + std::to_string(n_layers));
  if (batch.seq > m.config.max_seq_len)
    throw ShapeError("forward: sequence length " + std::to_string(batch.seq) +
                     " exceeds max_seq_len " + std::to_string(m.config.max_seq_len));
  std::vector<int> pos_ids(batch.token_ids.size());
  for (int b = 0; b < batch.batch; ++b)
    for (int s = 0; s < batch.seq; ++s) pos_ids[static_cast<size_t>(b) * batch.seq + s] = s;

  auto x = add(embed(m.token_embedding, batch.token_ids), embed(m.position_embedding, pos_ids));
  for (int li = 0; li < n_layers; ++li) {
    const auto& l = m.layers[li];
    const Tensor<T>* ga = gates.attn.empty() ? nullptr : &gates.attn[li];
    auto attn_out = attention_sublayer(m, li, x, batch.batch, batch.seq, ga);
    x = layer_norm(add(x, attn_out), l.ln1_gain, l.ln1_bias);
    const Tensor<T>* gf = gates.ff.empty() ? nullptr : &gates.ff[li];
    auto ff_out = ff_sublayer(m, li, x, batch.batch, batch.seq, gf);
    x = layer_norm(add(x, ff_out), l.ln2_gain, l.ln2_bias);
  }
  auto span_logits = matmul(x, m.qa_head);  // [B*S, 2]
  QaLogits<T> out;
  out.start = reshape(take_column(span_logits, 0), {batch.batch, batch.seq});
  out.end = reshape(take_column(span_logits, 1), {batch.batch, batch.seq});
  return out;
}

template <typename T>
QaLogits<T> forward(const Model<T>& m, const QaBatch& batch) {
  return forward_gated(m, batch, GateTensors<T>{});
}

// Binary/soft mask applied as constant gate tensors.
template <typename T>
GateTensors<T> gates_from_mask(const Model<T>& m, const GateMask& mask) {
  int n_layers = static_cast<int>(m.layers.size());
  if (static_cast<int>(mask.attn.size()) != n_layers ||
      static_cast<int>(mask.ff.size()) != n_layers)
    throw ShapeError("mask covers " + std::to_string(mask.attn.size()) + "/" +
                     std::to_string(mask.ff.size()) + " layers, model has " +
                     std::to_string(n_layers));
  GateTensors<T> g;
  for (int li = 0; li < n_layers; ++li) {
    if (static_cast<int>(mask.attn[li].size()) != m.layers[li].n_heads)
      throw ShapeError("mask: attn layer " + std::to_string(li) + " has " +
                       std::to_string(mask.attn[li].size()) + " entries, model has " +
                       std::to_string(m.layers[li].n_heads) + " heads");
    if (static_cast<int>(mask.ff[li].size()) != m.layers[li].d_ff)
      throw ShapeError("mask: ff layer " + std::to_string(li) + " has " +
                       std::to_string(mask.ff[li].size()) + " entries, model has " +
                       std::to_string(m.layers[li].d_ff) + " units");
    std::vector<T> av(mask.attn[li].begin(), mask.attn[li].end());
    std::vector<T> fv(mask.ff[li].begin(), mask.ff[li].end());
    g.attn.push_back(Tensor<T>::from_data({m.layers[li].n_heads}, std::move(av)));
    g.ff.push_back(Tensor<T>::from_data({m.layers[li].d_ff}, std::move(fv)));
  }
  return g;
}

template <typename T>
QaLogits<T> forward(const Model<T>& m, const QaBatch& batch, const GateMask& mask) {
  return forward_gated(m, batch, gates_from_mask<T>(m, mask));
}

// Mean over the batch of (start CE + end CE) / 2.
template <typename T>
Tensor<T> qa_loss(const QaLogits<T>& logits, const QaBatch& batch,
                  Reduction reduction = Reduction::kMean) {
  auto s = cross_entropy(logits.start, batch.start_targets, reduction);
  auto e = cross_entropy(logits.end, batch.end_targets, reduction);
  return scale(add(s, e), T(0.5));
}

template <typename T>
int64_t count_params(const Model<T>& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += static_cast<int64_t>(p.numel());
  return n;
}

// Multiply-accumulate counted as 2 FLOPs. Per layer, with N = batch*seq,
// E = d_model, Hl/Fl the layer's live head/ff counts and Dh the head width:
//   attention: 2*N*E*(3*Hl*Dh)         q/k/v projections
//            + 2*batch*Hl*seq*seq*Dh   attention scores
//            + 2*batch*Hl*seq*seq*Dh   context aggregation
//            + 2*N*(Hl*Dh)*E           output projection
//   feed-forward: 2*N*E*Fl*2           both linear maps
// Embedding lookups and the span head are excluded.
template <typename T>
int64_t count_flops(const Model<T>& m, int seq_len, int batch) {
  int64_t n = static_cast<int64_t>(batch) * seq_len;
  int64_t e = m.config.d_model;
  int64_t dh = m.head_dim;
  int64_t total = 0;
  for (const auto& l : m.layers) {
    int64_t hw = static_cast<int64_t>(l.n_heads) * dh;
    total += 2 * n * e * (3 * hw);                                        // q, k, v
    total += 2 * 2 * static_cast<int64_t>(batch) * l.n_heads * seq_len * seq_len * dh;
    total += 2 * n * hw * e;                                              // output projection
    total += 2 * n * e * static_cast<int64_t>(l.d_ff) * 2;                // feed-forward
  }
  return total;
}

struct Metrics {
  double span_exact_match = 0;
  double start_acc = 0;
  double end_acc = 0;
  double mean_loss = 0;
};

namespace detail {

// Per-example negative log softmax prob, computed in double from raw logits.
inline double row_nll(const float* row, int n, int target) {
  double mx = row[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
  double sum = 0;
  for (int j = 0; j < n; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
  return -(static_cast<double>(row[target]) - mx - std::log(sum));
}

inline int row_argmax(const float* row, int n) {
  int best = 0;
  for (int j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

}  // namespace detail

template <typename T = float>
Metrics evaluate(const Model<T>& m, const Dataset& data, int batch_size = 64) {
  static_assert(std::is_same_v<T, float>, "evaluate operates on the fp32 model path");
  if (data.empty()) throw ContractError("evaluate: empty dataset");
  NoGradGuard ng;
  Metrics out;
  int64_t em = 0, sa = 0, ea = 0;
  double loss_sum = 0;
  size_t i = 0;
  while (i < data.size()) {
    size_t n = std::min(static_cast<size_t>(batch_size), data.size() - i);
    auto batch = QaBatch::from_examples({data.data() + i, n}, m.config.vocab_size);
    auto logits = forward(m, batch);
    auto sv = logits.start.data();
    auto ev = logits.end.data();
    for (int b = 0; b < batch.batch; ++b) {
      const float* srow = sv.data() + static_cast<size_t>(b) * batch.seq;
      const float* erow = ev.data() + static_cast<size_t>(b) * batch.seq;
      int ps = detail::row_argmax(srow, batch.seq);
      int pe = detail::row_argmax(erow, batch.seq);
      bool s_ok = ps == batch.start_targets[b];
      bool e_ok = pe == batch.end_targets[b];
      sa += s_ok;
      ea += e_ok;
      em += s_ok && e_ok;
      loss_sum += 0.5 * (detail::row_nll(srow, batch.seq, batch.start_targets[b]) +
                         detail::row_nll(erow, batch.seq, batch.end_targets[b]));
    }
    i += n;
  }
  double n = static_cast<double>(data.size());
  out.span_exact_match = static_cast<double>(em) / n;
  out.start_acc = static_cast<double>(sa) / n;
  out.end_acc = static_cast<double>(ea) / n;
  out.mean_loss = loss_sum / n;
  return out;
}

}  // namespace prunekit
