#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "prunekit/transformer.hpp"

namespace prunekit {

enum class Objective { kCrossEntropy, kDistillation };

inline std::string objective_name(Objective o) {
  return o == Objective::kCrossEntropy ? "cross_entropy" : "distillation";
}

inline Objective objective_from_name(const std::string& s) {
  if (s == "cross_entropy" || s == "ce") return Objective::kCrossEntropy;
  if (s == "distillation" || s == "distill") return Objective::kDistillation;
  throw ValidationError("objective: must be 'cross_entropy' or 'distillation', got '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 3e-4;
  int batch_size = 24;
  double epochs = 1.0;
  int grad_accumulation_steps = 1;
  uint64_t seed = 1;
  Objective objective = Objective::kCrossEntropy;
  double distill_temperature = 2.0;
  double distill_alpha = 0.9;

  void validate() const {
    if (learning_rate < 0) throw ValidationError("TrainConfig.learning_rate: must be >= 0");
    if (batch_size < 1) throw ValidationError("TrainConfig.batch_size: must be >= 1");
    if (epochs < 0) throw ValidationError("TrainConfig.epochs: must be >= 0");
    if (grad_accumulation_steps < 1)
      throw ValidationError("TrainConfig.grad_accumulation_steps: must be >= 1");
    if (distill_alpha < 0 || distill_alpha > 1)
      throw ValidationError("TrainConfig.distill_alpha: must be in [0, 1]");
    if (distill_temperature <= 0)
      throw ValidationError("TrainConfig.distill_temperature: must be > 0");
  }
};

struct LossRow {
  int64_t step = 0;
  int epoch = 0;
  double objective = 0;
};

inline void write_loss_history_csv(const std::string& path, const std::vector<LossRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("loss history: cannot open '" + path + "' for writing");
  out << "step,epoch,objective\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%.6f", static_cast<long long>(r.step), r.epoch,
                  r.objective);
    out << buf << "\n";
  }
}

template <typename T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<Tensor<T>> params, T lr, T beta1 = T(0.9),
                         T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].numel(), T(0));
      v_[i].assign(params_[i].numel(), T(0));
    }
  }

  void step() {
    ++t_;
    T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto x = params_[i].data_mut();
      const T* g = params_[i].has_grad() ? params_[i].grad().data() : nullptr;
      for (size_t j = 0; j < x.size(); ++j) {
        T gj = g ? g[j] : T(0);
        m_[i][j] = beta1_ * m_[i][j] + (T(1) - beta1_) * gj;
        v_[i][j] = beta2_ * v_[i][j] + (T(1) - beta2_) * gj * gj;
        T mhat = m_[i][j] / bc1;
        T vhat = v_[i][j] / bc2;
        x[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor<T>> params_;
  T lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

// Temperature-scaled distillation over one logit family [n, c]:
//   alpha * T^2 * KL(softmax(teacher/T) || softmax(student/T))
//   + (1 - alpha) * cross_entropy(student, targets)
// Teacher logits enter as constants; no gradient flows to them.
template <typename T>
Tensor<T> distillation_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                            const std::vector<int>& targets, T temperature, T alpha) {
  if (student_logits.shape() != teacher_logits.shape())
    throw ShapeError("distillation_loss: student " + detail::shape_str(student_logits.shape()) +
                     " vs teacher " + detail::shape_str(teacher_logits.shape()));
  if (alpha == T(0)) return cross_entropy(student_logits, targets);

  size_t cols = static_cast<size_t>(student_logits.shape().back());
  size_t rows = student_logits.numel() / cols;
  // teacher distribution and its entropy term, computed outside the graph
  std::vector<T> scaled(teacher_logits.data().begin(), teacher_logits.data().end());
  for (auto& v : scaled) v /= temperature;
  std::vector<T> p(scaled.size());
  detail::softmax_rows(scaled.data(), p.data(), rows, cols);
  double p_logp = 0;
  for (T v : p) p_logp += v > T(0) ? static_cast<double>(v) * std::log(static_cast<double>(v)) : 0.0;

  auto log_q = log_softmax_last_axis(scale(student_logits, T(1) / temperature));
  auto p_const = Tensor<T>::from_data(student_logits.shape(), std::move(p));
  auto cross = scale(sum(mul(log_q, p_const)), T(-1) / static_cast<T>(rows));
  auto kl = add_scalar(cross, static_cast<T>(p_logp / static_cast<double>(rows)));
  auto soft = scale(kl, alpha * temperature * temperature);
  if (alpha == T(1)) return soft;
  return add(soft, scale(cross_entropy(student_logits, targets), T(1) - alpha));
}

// Distillation objective over both span heads: soft KL terms averaged over the
// start and end distributions plus the hard-target task loss.
template <typename T>
Tensor<T> qa_distillation_loss(const QaLogits<T>& student, const QaLogits<T>& teacher,
                               const QaBatch& batch, T temperature, T alpha) {
  auto s = distillation_loss(student.start, teacher.start, batch.start_targets, temperature, alpha);
  auto e = distillation_loss(student.end, teacher.end, batch.end_targets, temperature, alpha);
  return scale(add(s, e), T(0.5));
}

template <typename T>
struct TrainResult {
  Model<T> model;
  std::vector<double> epoch_mean_loss;
  std::vector<LossRow> history;
};

namespace detail {

// Shared minibatch loop for task training, retraining and distillation.
template <typename T>
TrainResult<T> run_training(const Model<T>& start, const Model<T>* teacher, const Dataset& data,
                            const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ContractError("train: empty dataset");
  TrainResult<T> result;
  result.model = start.clone();
  if (cfg.epochs == 0) return result;

  auto& model = result.model;
  model.set_trainable(true);
  auto params = model.parameters();
  AdamOptimizer<T> opt(params, static_cast<T>(cfg.learning_rate));
  opt.zero_grad();

  int64_t n = static_cast<int64_t>(data.size());
  int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  int64_t total_batches = std::llround(cfg.epochs * static_cast<double>(steps_per_epoch));
  if (total_batches < 1) total_batches = 1;

  std::vector<int> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  int64_t batches_done = 0;
  int accumulated = 0;
  T loss_scale = T(1) / static_cast<T>(cfg.grad_accumulation_steps);
  for (int epoch = 0; batches_done < total_batches; ++epoch) {
    Rng shuffle_rng(cfg.seed, 1000 + static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0;
    int64_t epoch_batches = 0;
    for (int64_t b = 0; b < steps_per_epoch && batches_done < total_batches; ++b) {
      int64_t lo = b * cfg.batch_size;
      int64_t hi = std::min<int64_t>(lo + cfg.batch_size, n);
      std::vector<QaExample> chunk;
      chunk.reserve(hi - lo);
      for (int64_t i = lo; i < hi; ++i) chunk.push_back(data[order[i]]);
      auto batch = QaBatch::from_examples(chunk, model.config.vocab_size);
      double loss_value = 0;
      try {
        auto logits = forward(model, batch);
        Tensor<T> loss;
        if (cfg.objective == Objective::kDistillation && cfg.distill_alpha > 0) {
          QaLogits<T> tlogits;
          {
            NoGradGuard ng;
            tlogits = forward(*teacher, batch);
          }
          loss = qa_distillation_loss(logits, tlogits, batch,
                                      static_cast<T>(cfg.distill_temperature),
                                      static_cast<T>(cfg.distill_alpha));
        } else {
          loss = qa_loss(logits, batch);
        }
        loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value))
          throw NumericError("loss is not finite");
        backward(scale(loss, loss_scale));
      } catch (const NumericError& e) {
        throw NumericError("training diverged at step " + std::to_string(batches_done) + ": " +
                           e.what());
      }
      ++accumulated;
      if (accumulated == cfg.grad_accumulation_steps) {
        opt.step();
        opt.zero_grad();
        accumulated = 0;
      }
      result.history.push_back({batches_done, epoch, loss_value});
      epoch_loss += loss_value;
      ++epoch_batches;
      ++batches_done;
    }
    if (epoch_batches > 0)
      result.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(epoch_batches));
  }
  if (accumulated > 0) {
    opt.step();
    opt.zero_grad();
  }
  return result;
}

}  // namespace detail

// Task training from scratch (or continued) with the cross-entropy objective.
template <typename T>
TrainResult<T> train_task(const Model<T>& model, const Dataset& data, const TrainConfig& cfg) {
  if (cfg.objective != Objective::kCrossEntropy)
    throw ContractError("train_task: objective must be cross_entropy");
  return detail::run_training<T>(model, nullptr, data, cfg);
}

// Continued training of a pruned model with the unpenalized task objective.
template <typename T>
TrainResult<T> retrain(const Model<T>& pruned, const Dataset& data, TrainConfig cfg) {
  cfg.objective = Objective::kCrossEntropy;
  return detail::run_training<T>(pruned, nullptr, data, cfg);
}

// Continued training of the student against a frozen unpruned teacher.
template <typename T>
TrainResult<T> distill(const Model<T>& student, const Model<T>& teacher, const Dataset& data,
                       TrainConfig cfg) {
  if (student.config.vocab_size != teacher.config.vocab_size)
    throw ContractError("distill: student vocab " + std::to_string(student.config.vocab_size) +
                        " != teacher vocab " + std::to_string(teacher.config.vocab_size));
  if (student.config.max_seq_len > teacher.config.max_seq_len)
    throw ContractError("distill: student max_seq_len exceeds teacher's");
  cfg.objective = Objective::kDistillation;
  return detail::run_training<T>(student, &teacher, data, cfg);
}

}  // namespace prunekit
