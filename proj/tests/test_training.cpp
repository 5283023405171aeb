#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "prunekit/gates.hpp"
#include "prunekit/surgery.hpp"
#include "prunekit/training.hpp"

using namespace prunekit;

namespace {

TransformerConfig tiny_config() {
  TransformerConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 16;
  c.vocab_size = 12;
  c.max_seq_len = 8;
  return c;
}

// start target = position of the repeated marker token; crafted to be
// learnable by a small model in a handful of steps
Dataset marker_dataset(int n, int seq, int vocab, uint64_t seed) {
  Rng rng(seed);
  Dataset data(n);
  for (auto& ex : data) {
    ex.tokens.resize(seq);
    for (auto& t : ex.tokens) t = rng.uniform_int(2, vocab - 1);
    int pos = rng.uniform_int(1, seq - 2);
    ex.tokens[pos] = 0;
    ex.tokens[pos + 1] = 1;
    ex.start = pos;
    ex.end = pos + 1;
  }
  return data;
}

bool same_weights(const Model<float>& a, const Model<float>& b) {
  auto pa = a.parameters();
  auto pb = b.parameters();
  for (size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].shape() != pb[i].shape()) return false;
    for (size_t j = 0; j < pa[i].numel(); ++j)
      if (pa[i].data()[j] != pb[i].data()[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("zero epochs and zero learning rate leave the model unchanged") {
  auto m = build_model<float>(tiny_config(), 50);
  auto data = marker_dataset(48, 8, m.config.vocab_size, 60);

  TrainConfig cfg;
  cfg.epochs = 0;
  auto r = train_task(m, data, cfg);
  REQUIRE(same_weights(m, r.model));

  TrainConfig frozen;
  frozen.learning_rate = 0.0;
  frozen.epochs = 1;
  auto r2 = retrain(m, data, frozen);
  REQUIRE(same_weights(m, r2.model));
}

TEST_CASE("training is deterministic given the seed") {
  auto m = build_model<float>(tiny_config(), 51);
  auto data = marker_dataset(96, 8, m.config.vocab_size, 61);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 9;
  auto a = train_task(m, data, cfg);
  auto b = train_task(m, data, cfg);
  REQUIRE(same_weights(a.model, b.model));
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i)
    REQUIRE(a.history[i].objective == b.history[i].objective);
}

TEST_CASE("loss falls across epochs on a learnable task") {
  auto m = build_model<float>(tiny_config(), 52);
  auto data = marker_dataset(192, 8, m.config.vocab_size, 62);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 4;
  auto r = train_task(m, data, cfg);
  REQUIRE(r.epoch_mean_loss.size() == 4);
  REQUIRE(r.epoch_mean_loss.back() < r.epoch_mean_loss.front());
}

TEST_CASE("train_task rejects the distillation objective") {
  auto m = build_model<float>(tiny_config(), 53);
  auto data = marker_dataset(24, 8, m.config.vocab_size, 63);
  TrainConfig cfg;
  cfg.objective = Objective::kDistillation;
  REQUIRE_THROWS_AS(train_task(m, data, cfg), ContractError);
  REQUIRE_THROWS_AS(train_task(m, Dataset{}, TrainConfig{}), ContractError);
}

TEST_CASE("retrain of an unpruned model is plain continued training") {
  auto m = build_model<float>(tiny_config(), 54);
  auto data = marker_dataset(96, 8, m.config.vocab_size, 64);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.seed = 3;
  auto a = retrain(m, data, cfg);
  auto b = train_task(m, data, cfg);
  REQUIRE(same_weights(a.model, b.model));
}

TEST_CASE("gradient accumulation changes step granularity, not determinism") {
  auto m = build_model<float>(tiny_config(), 55);
  auto data = marker_dataset(96, 8, m.config.vocab_size, 65);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.grad_accumulation_steps = 3;
  auto a = train_task(m, data, cfg);
  auto b = train_task(m, data, cfg);
  REQUIRE(same_weights(a.model, b.model));
}

TEST_CASE("distillation loss arithmetic") {
  auto s = Tensor<float>::from_data({2, 4}, {0.5f, -0.2f, 0.8f, 0.1f, 1.0f, 0.0f, -0.5f, 0.3f},
                                    true);
  auto t = Tensor<float>::from_data({2, 4}, {0.7f, -0.1f, 0.6f, 0.2f, 0.9f, 0.1f, -0.4f, 0.2f});
  std::vector<int> targets{2, 0};

  // identical logits, pure soft loss: zero
  auto self_kl = distillation_loss(s.detached(), s.detached(), targets, 2.0f, 1.0f);
  REQUIRE(std::abs(self_kl.item()) <= 1e-6);

  // alpha mixes the two component losses exactly
  auto soft = distillation_loss(s, t, targets, 2.0f, 1.0f);
  auto hard = distillation_loss(s, t, targets, 2.0f, 0.0f);
  auto mixed = distillation_loss(s, t, targets, 2.0f, 0.5f);
  REQUIRE_THAT(mixed.item(), Catch::Matchers::WithinAbs(0.5 * (soft.item() + hard.item()), 1e-6));

  // alpha=0 reduces to cross entropy on the same graph values
  REQUIRE(hard.item() == cross_entropy(s, targets).item());

  auto wrong = Tensor<float>::zeros({2, 3});
  REQUIRE_THROWS_AS(distillation_loss(s, wrong, targets, 2.0f, 0.5f), ShapeError);
}

TEST_CASE("temperature-scaled soft loss approaches the quadratic-form limit") {
  std::vector<float> sv{0.5f, -0.2f, 0.8f, 0.1f};
  std::vector<float> tv{1.5f, -0.9f, 0.4f, 0.6f};
  auto s = Tensor<float>::from_data({1, 4}, sv);
  auto t = Tensor<float>::from_data({1, 4}, tv);
  std::vector<int> targets{0};

  // with T^2 scaling, the limit is 0.5 * Var_uniform(teacher - student)
  double mean_d = 0, mean_d2 = 0;
  for (int i = 0; i < 4; ++i) {
    double d = static_cast<double>(tv[i]) - sv[i];
    mean_d += d / 4;
    mean_d2 += d * d / 4;
  }
  double limit = 0.5 * (mean_d2 - mean_d * mean_d);
  double at_100 = distillation_loss(s, t, targets, 100.0f, 1.0f).item();
  double at_200 = distillation_loss(s, t, targets, 200.0f, 1.0f).item();
  REQUIRE_THAT(at_100, Catch::Matchers::WithinRel(limit, 0.02));
  REQUIRE_THAT(at_200, Catch::Matchers::WithinRel(limit, 0.02));

  // pre-scaling, the raw KL decays like 1/T^2
  double kl_100 = at_100 / (100.0 * 100.0);
  double kl_200 = at_200 / (200.0 * 200.0);
  REQUIRE_THAT(kl_100 / kl_200, Catch::Matchers::WithinRel(4.0, 0.05));
}

TEST_CASE("distillation loss gradients match finite differences") {
  auto s = Tensor<double>::from_data({2, 3}, {0.5, -0.2, 0.8, 1.0, 0.0, -0.5}, true);
  auto t = Tensor<double>::from_data({2, 3}, {0.7, -0.1, 0.6, 0.9, 0.1, -0.4});
  std::vector<int> targets{2, 0};
  auto f = [&] { return distillation_loss(s, t, targets, 2.0, 0.7); };
  REQUIRE(finite_difference_check<double>(f, {s}, 1e-4) <= 1e-3);
}

TEST_CASE("self-distillation yields near-zero loss and gradients") {
  auto m = build_model<float>(tiny_config(), 56);
  auto data = marker_dataset(24, 8, m.config.vocab_size, 66);
  auto batch = QaBatch::from_examples(data, m.config.vocab_size);
  QaLogits<float> teacher_logits;
  {
    NoGradGuard ng;
    teacher_logits = forward(m, batch);
  }
  auto student_logits = forward(m, batch);
  auto loss = qa_distillation_loss(student_logits, teacher_logits, batch, 2.0f, 1.0f);
  REQUIRE(std::abs(loss.item()) <= 1e-5);
  backward(loss);
  double worst = 0;
  for (const auto& p : m.parameters())
    if (p.has_grad())
      for (float g : p.grad()) worst = std::max(worst, std::abs(static_cast<double>(g)));
  REQUIRE(worst <= 1e-4);
}

TEST_CASE("distillation with alpha 0 is bit-for-bit the retrain path") {
  auto m = build_model<float>(tiny_config(), 57);
  auto teacher = build_model<float>(tiny_config(), 58);
  auto data = marker_dataset(96, 8, m.config.vocab_size, 67);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.seed = 5;
  cfg.distill_alpha = 0.0;
  auto d = distill(m, teacher, data, cfg);
  auto r = retrain(m, data, cfg);
  REQUIRE(same_weights(d.model, r.model));
  for (size_t i = 0; i < d.history.size(); ++i)
    REQUIRE(d.history[i].objective == r.history[i].objective);
}

TEST_CASE("teacher is immutable through distillation") {
  auto teacher = build_model<float>(tiny_config(), 59);
  auto snapshot = teacher.clone();
  auto student = build_model<float>(tiny_config(), 60);
  auto data = marker_dataset(48, 8, teacher.config.vocab_size, 68);
  TrainConfig cfg;
  cfg.epochs = 1;
  auto r = distill(student, teacher, data, cfg);
  REQUIRE(same_weights(teacher, snapshot));
  REQUIRE_FALSE(same_weights(r.model, student));
}

TEST_CASE("distill rejects vocabulary mismatch") {
  auto teacher = build_model<float>(tiny_config(), 61);
  TransformerConfig other = tiny_config();
  other.vocab_size = 16;
  auto student = build_model<float>(other, 62);
  auto data = marker_dataset(24, 8, 12, 69);
  REQUIRE_THROWS_AS(distill(student, teacher, data, TrainConfig{}), ContractError);
}

TEST_CASE("divergence aborts with a diagnostic") {
  auto m = build_model<float>(tiny_config(), 63);
  auto data = marker_dataset(96, 8, m.config.vocab_size, 70);
  TrainConfig cfg;
  cfg.learning_rate = 1e18;  // guaranteed blow-up
  cfg.epochs = 2;
  REQUIRE_THROWS_MATCHES(train_task(m, data, cfg), NumericError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("diverged")));
}

TEST_CASE("loss history CSV has the step, epoch, objective schema") {
  auto m = build_model<float>(tiny_config(), 64);
  auto data = marker_dataset(48, 8, m.config.vocab_size, 71);
  TrainConfig cfg;
  cfg.epochs = 1;
  auto r = train_task(m, data, cfg);
  std::string path = "loss_history_test.csv";
  write_loss_history_csv(path, r.history);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  REQUIRE(header == "step,epoch,objective");
  int rows = 0;
  std::string line;
  while (std::getline(in, line)) ++rows;
  REQUIRE(rows == static_cast<int>(r.history.size()));
  std::remove(path.c_str());
}
