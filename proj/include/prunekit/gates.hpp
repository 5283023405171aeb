#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <tuple>
#include <vector>

#include "prunekit/training.hpp"
#include "prunekit/transformer.hpp"

namespace prunekit {

// Mean absolute task-loss gradient of each gate, evaluated at gate value 1.
struct ImportanceScores {
  std::vector<std::vector<double>> attn;
  std::vector<std::vector<double>> ff;
};

struct PenaltyWeights {
  double lambda_attn = 0;
  double lambda_ff = 0;

  void validate() const {
    if (lambda_attn < 0) throw ValidationError("PenaltyWeights.lambda_attn: must be >= 0");
    if (lambda_ff < 0) throw ValidationError("PenaltyWeights.lambda_ff: must be >= 0");
  }
};

// Stretched-clamped binary-concrete distribution constants. The defaults are
// the reference values from the L0 literature; temperature 2/3, stretch
// limits (-0.1, 1.1).
struct HardConcreteParams {
  double beta = 2.0 / 3.0;
  double gamma_low = -0.1;
  double zeta = 1.1;

  void validate() const {
    if (beta <= 0) throw ValidationError("HardConcreteParams.beta: must be > 0");
    if (!(gamma_low < 0)) throw ValidationError("HardConcreteParams.gamma_low: must be < 0");
    if (!(zeta > 1)) throw ValidationError("HardConcreteParams.zeta: must be > 1");
  }
};

// Which event the sparsity penalty counts: gates that land exactly at 1, or
// gates that are merely nonzero (the L0 literature's usual choice).
enum class PenaltyMode { kExpectOne, kExpectNonzero };

// Trainable log-domain gate parameters for one gate family, one tensor per layer.
template <typename T = float>
struct HardConcreteGates {
  std::vector<Tensor<T>> log_alpha;
  HardConcreteParams dist;

  std::vector<int> sizes() const {
    std::vector<int> s;
    for (const auto& t : log_alpha) s.push_back(static_cast<int>(t.numel()));
    return s;
  }
};

template <typename T = float>
HardConcreteGates<T> make_hard_concrete(const std::vector<int>& sizes, double log_alpha_init,
                                        HardConcreteParams dist = {}) {
  dist.validate();
  HardConcreteGates<T> g;
  g.dist = dist;
  for (int n : sizes)
    g.log_alpha.push_back(Tensor<T>::full({n}, static_cast<T>(log_alpha_init), true));
  return g;
}

namespace detail {

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double sigmoid_d(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// logit of the pre-clamp quantile at which the stretched sample crosses `value`
inline double crossing_logit(const HardConcreteParams& d, double value) {
  double c = (value - d.gamma_low) / (d.zeta - d.gamma_low);
  return logit(c);
}

}  // namespace detail

// One stretched-clamped concrete sample per gate, differentiable in log_alpha
// through the reparameterized uniform noise. Resample every minibatch.
template <typename T>
std::vector<Tensor<T>> sample_hard_concrete(const HardConcreteGates<T>& gates, Rng& rng) {
  gates.dist.validate();
  std::vector<Tensor<T>> out;
  out.reserve(gates.log_alpha.size());
  T spread = static_cast<T>(gates.dist.zeta - gates.dist.gamma_low);
  T low = static_cast<T>(gates.dist.gamma_low);
  T inv_beta = static_cast<T>(1.0 / gates.dist.beta);
  for (const auto& la : gates.log_alpha) {
    std::vector<T> noise(la.numel());
    for (auto& v : noise) {
      double u = rng.uniform_open();
      v = static_cast<T>(std::log(u) - std::log1p(-u));
    }
    auto noise_t = Tensor<T>::from_data(la.shape(), std::move(noise));
    auto s = sigmoid(scale(add(la, noise_t), inv_beta));
    out.push_back(clamp01(add_scalar(scale(s, spread), low)));
  }
  return out;
}

// Deterministic test-time gate value: the stretched sigmoid of log_alpha/beta,
// clamped to [0, 1].
template <typename T>
std::vector<std::vector<double>> deterministic_gate_values(const HardConcreteGates<T>& gates) {
  std::vector<std::vector<double>> out;
  for (const auto& la : gates.log_alpha) {
    std::vector<double> z(la.numel());
    for (size_t i = 0; i < z.size(); ++i) {
      double s = detail::sigmoid_d(static_cast<double>(la.data()[i]) / gates.dist.beta);
      z[i] = std::clamp(s * (gates.dist.zeta - gates.dist.gamma_low) + gates.dist.gamma_low, 0.0,
                        1.0);
    }
    out.push_back(std::move(z));
  }
  return out;
}

// P(gate == 1) = sigmoid(log_alpha - beta * logit(c1)) with
// c1 = (1 - gamma_low) / (zeta - gamma_low): the sample clamps to 1 exactly
// when the pre-clamp value reaches 1.
template <typename T>
std::vector<std::vector<double>> prob_gate_one(const HardConcreteGates<T>& gates) {
  gates.dist.validate();
  double shift = gates.dist.beta * detail::crossing_logit(gates.dist, 1.0);
  std::vector<std::vector<double>> out;
  for (const auto& la : gates.log_alpha) {
    std::vector<double> p(la.numel());
    for (size_t i = 0; i < p.size(); ++i)
      p[i] = detail::sigmoid_d(static_cast<double>(la.data()[i]) - shift);
    out.push_back(std::move(p));
  }
  return out;
}

// Differentiable expected count of active gates, summed over layers.
template <typename T>
Tensor<T> expected_active_gates(const HardConcreteGates<T>& gates,
                                PenaltyMode mode = PenaltyMode::kExpectOne) {
  gates.dist.validate();
  double crossing = mode == PenaltyMode::kExpectOne ? 1.0 : 0.0;
  T shift = static_cast<T>(gates.dist.beta * detail::crossing_logit(gates.dist, crossing));
  Tensor<T> total;
  for (const auto& la : gates.log_alpha) {
    auto p = sum(sigmoid(add_scalar(la, static_cast<T>(-shift))));
    total = total.defined() ? add(total, p) : p;
  }
  return total;
}

// Task loss plus lambda-weighted expected active-gate counts, minimized.
template <typename T>
Tensor<T> penalized_objective(const Tensor<T>& task_loss, const HardConcreteGates<T>* gates_attn,
                              const HardConcreteGates<T>* gates_ff, const PenaltyWeights& weights,
                              PenaltyMode mode = PenaltyMode::kExpectOne) {
  weights.validate();
  Tensor<T> total = task_loss;
  if (gates_attn && weights.lambda_attn > 0)
    total = add(total, scale(expected_active_gates(*gates_attn, mode),
                             static_cast<T>(weights.lambda_attn)));
  if (gates_ff && weights.lambda_ff > 0)
    total = add(total, scale(expected_active_gates(*gates_ff, mode),
                             static_cast<T>(weights.lambda_ff)));
  return total;
}

namespace detail {

// Retain at least one unit per layer, preferring the highest score
// (ties to the lowest index). Returns the layers that needed fixing.
inline std::vector<int> apply_degenerate_guard(std::vector<std::vector<float>>& mask,
                                               const std::vector<std::vector<double>>* scores) {
  std::vector<int> fixed;
  for (size_t l = 0; l < mask.size(); ++l) {
    if (mask[l].empty()) continue;
    bool any = false;
    for (float v : mask[l]) any = any || v != 0.0f;
    if (any) continue;
    size_t best = 0;
    if (scores) {
      for (size_t u = 1; u < mask[l].size(); ++u)
        if ((*scores)[l][u] > (*scores)[l][best]) best = u;
    }
    mask[l][best] = 1.0f;
    fixed.push_back(static_cast<int>(l));
  }
  return fixed;
}

}  // namespace detail

// Independent Bernoulli(p) gates, deterministic in the seed; the guard keeps
// the draw closest to retention when a layer empties. The scores (negated
// draws) order units by how close they came to being kept, which rounding
// and matched-fraction comparisons reuse.
inline GateMask random_gates_with_scores(const std::vector<int>& heads_per_layer,
                                         const std::vector<int>& ff_per_layer, double p,
                                         uint64_t seed, ImportanceScores* scores_out) {
  if (p < 0 || p > 1) throw ValidationError("random_gates: p must be in [0, 1], got " +
                                            std::to_string(p));
  Rng rng(seed, 7);
  GateMask mask;
  ImportanceScores scores;
  auto draw = [&](const std::vector<int>& sizes, std::vector<std::vector<float>>& out,
                  std::vector<std::vector<double>>& sc) {
    for (int n : sizes) {
      std::vector<float> m(n);
      std::vector<double> s(n);
      for (int i = 0; i < n; ++i) {
        double u = rng.uniform();
        m[i] = u < p ? 1.0f : 0.0f;
        s[i] = -u;  // closest-to-kept first
      }
      out.push_back(std::move(m));
      sc.push_back(std::move(s));
    }
  };
  draw(heads_per_layer, mask.attn, scores.attn);
  draw(ff_per_layer, mask.ff, scores.ff);
  detail::apply_degenerate_guard(mask.attn, &scores.attn);
  detail::apply_degenerate_guard(mask.ff, &scores.ff);
  if (scores_out) *scores_out = std::move(scores);
  return mask;
}

inline GateMask random_gates(const std::vector<int>& heads_per_layer,
                             const std::vector<int>& ff_per_layer, double p, uint64_t seed) {
  return random_gates_with_scores(heads_per_layer, ff_per_layer, p, seed, nullptr);
}

// Mean absolute gradient of the per-example task loss with respect to each
// gate, evaluated at gate value 1 over (up to max_batches chunks of) the data.
// Per-example gate copies make the result independent of chunking and order.
template <typename T>
ImportanceScores gain_scores(const Model<T>& model, const Dataset& data, int max_batches = 0,
                             int batch_size = 24) {
  if (data.empty()) throw ContractError("gain_scores: empty dataset");
  auto frozen = model.clone();
  frozen.set_trainable(false);
  ImportanceScores scores;
  for (const auto& l : frozen.layers) {
    scores.attn.emplace_back(l.n_heads, 0.0);
    scores.ff.emplace_back(l.d_ff, 0.0);
  }
  int n_layers = static_cast<int>(frozen.layers.size());
  size_t i = 0;
  int64_t chunks = 0;
  int64_t examples = 0;
  while (i < data.size() && (max_batches <= 0 || chunks < max_batches)) {
    size_t n = std::min(static_cast<size_t>(batch_size), data.size() - i);
    auto batch = QaBatch::from_examples({data.data() + i, n}, frozen.config.vocab_size);
    GateTensors<T> gates;
    for (int l = 0; l < n_layers; ++l) {
      gates.attn.push_back(
          Tensor<T>::full({batch.batch, frozen.layers[l].n_heads}, T(1), true));
      gates.ff.push_back(Tensor<T>::full({batch.batch, frozen.layers[l].d_ff}, T(1), true));
    }
    auto loss = qa_loss(forward_gated(frozen, batch, gates), batch, Reduction::kSum);
    backward(loss);
    for (int l = 0; l < n_layers; ++l) {
      auto ga = gates.attn[l].grad();
      auto gf = gates.ff[l].grad();
      int nh = frozen.layers[l].n_heads, nf = frozen.layers[l].d_ff;
      for (int b = 0; b < batch.batch; ++b) {
        for (int h = 0; h < nh; ++h)
          scores.attn[l][h] += std::abs(static_cast<double>(ga[static_cast<size_t>(b) * nh + h]));
        for (int f = 0; f < nf; ++f)
          scores.ff[l][f] += std::abs(static_cast<double>(gf[static_cast<size_t>(b) * nf + f]));
      }
    }
    examples += batch.batch;
    ++chunks;
    i += n;
  }
  for (auto& layer : scores.attn)
    for (auto& v : layer) v /= static_cast<double>(examples);
  for (auto& layer : scores.ff)
    for (auto& v : layer) v /= static_cast<double>(examples);
  return scores;
}

namespace detail {

inline std::vector<std::vector<float>> threshold_family(
    const std::vector<std::vector<double>>& scores, double keep_fraction) {
  size_t total = 0;
  for (const auto& l : scores) total += l.size();
  int64_t n_keep = std::max<int64_t>(1, std::llround(keep_fraction * static_cast<double>(total)));
  std::vector<std::tuple<double, size_t, size_t>> flat;  // (-score, layer, unit)
  flat.reserve(total);
  for (size_t l = 0; l < scores.size(); ++l)
    for (size_t u = 0; u < scores[l].size(); ++u) flat.emplace_back(-scores[l][u], l, u);
  std::sort(flat.begin(), flat.end());
  std::vector<std::vector<float>> mask;
  for (const auto& l : scores) mask.emplace_back(l.size(), 0.0f);
  for (int64_t i = 0; i < n_keep && i < static_cast<int64_t>(flat.size()); ++i)
    mask[std::get<1>(flat[i])][std::get<2>(flat[i])] = 1.0f;
  apply_degenerate_guard(mask, &scores);
  return mask;
}

}  // namespace detail

// Global top-fraction retention per gate family; ties resolved by
// (layer, unit) ascending.
inline GateMask threshold_scores(const ImportanceScores& scores, double keep_fraction) {
  if (!(keep_fraction > 0) || keep_fraction > 1)
    throw ValidationError("threshold_scores: keep_fraction must be in (0, 1], got " +
                          std::to_string(keep_fraction));
  GateMask mask;
  mask.attn = detail::threshold_family(scores.attn, keep_fraction);
  mask.ff = detail::threshold_family(scores.ff, keep_fraction);
  return mask;
}

// Threshold the deterministic test-time gate value; 0.5 unless configured.
template <typename T>
std::vector<std::vector<float>> finalize_family(const HardConcreteGates<T>& gates,
                                                double threshold = 0.5) {
  auto z = deterministic_gate_values(gates);
  std::vector<std::vector<float>> mask;
  for (const auto& layer : z) {
    std::vector<float> m(layer.size());
    for (size_t i = 0; i < layer.size(); ++i) m[i] = layer[i] >= threshold ? 1.0f : 0.0f;
    mask.push_back(std::move(m));
  }
  detail::apply_degenerate_guard(mask, &z);
  return mask;
}

template <typename T>
GateMask finalize_gates(const HardConcreteGates<T>& gates_attn,
                        const HardConcreteGates<T>& gates_ff, double threshold = 0.5) {
  GateMask mask;
  mask.attn = finalize_family(gates_attn, threshold);
  mask.ff = finalize_family(gates_ff, threshold);
  return mask;
}

enum class GateFamily { kAttention, kFeedForward };

struct GateTrainConfig {
  double learning_rate = 0.1;  // deliberately large; gates are few and robust
  int batch_size = 24;
  double epochs = 1.0;
  uint64_t seed = 1;
  double log_alpha_init = 2.0;  // strong initial keep bias
  HardConcreteParams dist;
  PenaltyMode penalty_mode = PenaltyMode::kExpectOne;
  Objective objective = Objective::kCrossEntropy;
  double distill_temperature = 2.0;
  double distill_alpha = 0.9;

  void validate() const {
    if (learning_rate <= 0) throw ValidationError("GateTrainConfig.learning_rate: must be > 0");
    if (batch_size < 1) throw ValidationError("GateTrainConfig.batch_size: must be >= 1");
    if (epochs <= 0) throw ValidationError("GateTrainConfig.epochs: must be > 0");
    dist.validate();
  }
};

template <typename T = float>
struct L0TrainResult {
  HardConcreteGates<T> attn;
  HardConcreteGates<T> ff;
  std::vector<LossRow> attn_history;
  std::vector<LossRow> ff_history;
};

namespace detail {

template <typename T>
HardConcreteGates<T> train_gate_family(const Model<T>& model, const Dataset& data,
                                       GateFamily family, double lambda,
                                       const GateTrainConfig& cfg, std::vector<LossRow>& history) {
  auto sizes = family == GateFamily::kAttention ? model.heads_per_layer() : model.ff_per_layer();
  auto gates = make_hard_concrete<T>(sizes, cfg.log_alpha_init, cfg.dist);
  AdamOptimizer<T> opt(gates.log_alpha, static_cast<T>(cfg.learning_rate));
  opt.zero_grad();

  uint64_t stream_base = family == GateFamily::kAttention ? 100 : 200;
  Rng noise_rng(cfg.seed, stream_base + 1);

  int64_t n = static_cast<int64_t>(data.size());
  int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  int64_t total_batches =
      std::max<int64_t>(1, std::llround(cfg.epochs * static_cast<double>(steps_per_epoch)));

  std::vector<int> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  PenaltyWeights weights;
  (family == GateFamily::kAttention ? weights.lambda_attn : weights.lambda_ff) = lambda;

  int64_t batches_done = 0;
  for (int epoch = 0; batches_done < total_batches; ++epoch) {
    Rng shuffle_rng(cfg.seed, stream_base + 10 + static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order.begin(), order.end());
    for (int64_t b = 0; b < steps_per_epoch && batches_done < total_batches; ++b) {
      int64_t lo = b * cfg.batch_size;
      int64_t hi = std::min<int64_t>(lo + cfg.batch_size, n);
      std::vector<QaExample> chunk;
      for (int64_t i = lo; i < hi; ++i) chunk.push_back(data[order[i]]);
      auto batch = QaBatch::from_examples(chunk, model.config.vocab_size);

      auto soft = sample_hard_concrete(gates, noise_rng);
      GateTensors<T> g;
      (family == GateFamily::kAttention ? g.attn : g.ff) = std::move(soft);
      auto logits = forward_gated(model, batch, g);
      Tensor<T> task;
      if (cfg.objective == Objective::kDistillation) {
        QaLogits<T> tlogits;
        {
          NoGradGuard ng;
          tlogits = forward(model, batch);  // the unpruned, ungated model is the teacher
        }
        task = qa_distillation_loss(logits, tlogits, batch,
                                    static_cast<T>(cfg.distill_temperature),
                                    static_cast<T>(cfg.distill_alpha));
      } else {
        task = qa_loss(logits, batch);
      }
      auto loss = penalized_objective(task,
                                      family == GateFamily::kAttention ? &gates : nullptr,
                                      family == GateFamily::kFeedForward ? &gates : nullptr,
                                      weights, cfg.penalty_mode);
      backward(loss);
      opt.step();
      opt.zero_grad();
      history.push_back({batches_done, epoch, static_cast<double>(task.item())});
      ++batches_done;
    }
  }
  return gates;
}

}  // namespace detail

// Trains attention and feed-forward gate parameters as two independent
// optimizations over a frozen task model; the model's own ungated forward
// serves as the teacher when the objective is distillation.
template <typename T>
L0TrainResult<T> train_gates_l0(const Model<T>& model, const Dataset& data,
                                const PenaltyWeights& weights, const GateTrainConfig& cfg) {
  cfg.validate();
  weights.validate();
  if (!model.frozen())
    throw ContractError(
        "train_gates_l0: transformer and embedding parameters must be frozen first");
  if (data.empty()) throw ContractError("train_gates_l0: empty dataset");
  L0TrainResult<T> out;
  out.attn = detail::train_gate_family(model, data, GateFamily::kAttention, weights.lambda_attn,
                                       cfg, out.attn_history);
  out.ff = detail::train_gate_family(model, data, GateFamily::kFeedForward, weights.lambda_ff,
                                     cfg, out.ff_history);
  return out;
}

template <typename T>
double retained_fraction(const std::vector<std::vector<T>>& mask) {
  size_t kept = 0, total = 0;
  for (const auto& l : mask) {
    total += l.size();
    for (auto v : l) kept += v != 0;
  }
  return total ? static_cast<double>(kept) / static_cast<double>(total) : 1.0;
}

struct LambdaCalibration {
  double lambda_attn = 0;
  double lambda_ff = 0;
  std::vector<std::pair<double, double>> attn_grid;  // (lambda, retained fraction)
  std::vector<std::pair<double, double>> ff_grid;
};

// Penalty weights do not transfer across model scales, so pick them from a
// log-spaced grid: the smallest weight per family whose one-epoch gate run
// retains at most target_retention. Falls back to the largest grid point.
template <typename T>
LambdaCalibration calibrate_lambda(const Model<T>& model, const Dataset& data,
                                   const GateTrainConfig& cfg, double target_retention = 0.7,
                                   std::vector<double> grid = {1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2,
                                                               1e-1}) {
  if (!model.frozen()) throw ContractError("calibrate_lambda: model must be frozen");
  LambdaCalibration out;
  for (auto family : {GateFamily::kAttention, GateFamily::kFeedForward}) {
    bool is_attn = family == GateFamily::kAttention;
    auto& chosen = is_attn ? out.lambda_attn : out.lambda_ff;
    auto& results = is_attn ? out.attn_grid : out.ff_grid;
    chosen = grid.back();
    bool found = false;
    for (double lambda : grid) {
      std::vector<LossRow> history;
      auto gates = detail::train_gate_family(model, data, family, lambda, cfg, history);
      double fraction = retained_fraction(finalize_family(gates));
      results.emplace_back(lambda, fraction);
      if (!found && fraction <= target_retention) {
        chosen = lambda;
        found = true;
      }
    }
  }
  return out;
}

}  // namespace prunekit
