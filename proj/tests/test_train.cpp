#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ctsan/errors.hpp"
#include "ctsan/train.hpp"
#include "dataset_fixture.hpp"

namespace ctsan {
namespace {

using testing::small_dataset;
using testing::small_model;

NamedTensor param(const std::string& name, std::vector<double> values) {
  const std::size_t n = values.size();
  return {name, Tensor::parameter({n}, std::move(values))};
}

TEST(AdamTest, ZeroGradientLeavesParametersUnchanged) {
  PrecisionScope f64(Precision::kF64);
  auto p = param("w", {0.5, -1.25, 3.0});
  Adam adam({p}, {.lr = 0.1});
  for (int i = 0; i < 5; ++i) {
    p.second.mutable_grad();
    adam.step();
  }
  EXPECT_EQ(std::vector<double>(p.second.data().begin(), p.second.data().end()),
            (std::vector<double>{0.5, -1.25, 3.0}));
}

TEST(AdamTest, ConstantGradientMovesByTheLearningRate) {
  PrecisionScope f64(Precision::kF64);
  auto p = param("w", {0.0, 0.0});
  const double lr = 1e-3;
  Adam adam({p}, {.lr = lr});
  for (int i = 0; i < 1000; ++i) {
    const double before0 = p.second.data()[0], before1 = p.second.data()[1];
    auto g = p.second.mutable_grad();
    g[0] = 2.5;
    g[1] = -0.01;
    adam.step();
    EXPECT_NEAR(before0 - p.second.data()[0], lr, 0.01 * lr);
    EXPECT_NEAR(p.second.data()[1] - before1, lr, 0.01 * lr);
  }
  EXPECT_EQ(adam.steps(), 1000u);
}

TEST(AdamTest, TwoStepsMatchTheUpdateRule) {
  PrecisionScope f64(Precision::kF64);
  auto p = param("w", {1.0});
  const AdamOptions o{.lr = 0.01, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8};
  Adam adam({p}, o);
  double w = 1.0, m = 0.0, v = 0.0;
  const double grads[] = {0.3, -0.7};
  for (int t = 1; t <= 2; ++t) {
    const double g = grads[t - 1];
    p.second.mutable_grad()[0] = g;
    adam.step();
    m = o.beta1 * m + (1 - o.beta1) * g;
    v = o.beta2 * v + (1 - o.beta2) * g * g;
    w -= o.lr * (m / (1 - std::pow(o.beta1, t))) / (std::sqrt(v / (1 - std::pow(o.beta2, t))) + o.eps);
    EXPECT_DOUBLE_EQ(p.second.data()[0], w);
    EXPECT_EQ(p.second.grad()[0], 0.0);
  }
}

TEST(AdamTest, MissingGradientIsAnError) {
  auto p = param("w", {1.0});
  Adam adam({p}, {});
  EXPECT_THROW(adam.step(), UsageError);
}

TEST(ClipTest, RescalesOnlyAboveTheLimit) {
  auto a = param("a", {3.0}), b = param("b", {0.0});
  a.second.mutable_grad()[0] = 3.0;
  b.second.mutable_grad()[0] = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm({a, b}, 10.0), 5.0);
  EXPECT_DOUBLE_EQ(a.second.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm({a, b}, 1.0), 5.0);
  EXPECT_NEAR(a.second.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.second.grad()[0], 0.8, 1e-15);
}

TEST(TrainConfigTest, KeysRoundTripAndUnknownKeysFail) {
  TrainConfig c;
  apply_train_keys(parse_key_values("lr = 0.003\nepochs = 4\nprecision = f64\ntask = mc\nhidden = 12\n"), c);
  EXPECT_DOUBLE_EQ(c.lr, 0.003);
  EXPECT_EQ(c.epochs, 4u);
  EXPECT_EQ(c.precision, Precision::kF64);
  EXPECT_EQ(c.model.task, Task::kMultipleChoice);
  EXPECT_EQ(c.model.hidden, 12u);
  TrainConfig back;
  apply_train_keys(train_keys(c), back);
  EXPECT_EQ(train_keys(back), train_keys(c));
  EXPECT_THROW(apply_train_keys(parse_key_values("learning_rate = 1\n"), back), InputError);
  EXPECT_THROW(apply_train_keys(parse_key_values("precision = f16\n"), back), InputError);
}

TrainConfig quick(Task task, std::size_t epochs) {
  TrainConfig c;
  c.model = small_model(task);
  c.lr = 3e-3;
  c.batch_size = 4;
  c.epochs = epochs;
  c.patience = 0;
  c.seed = 5;
  return c;
}

bool same_values(const ParamStore& a, const ParamStore& b, const std::string& prefix = "") {
  const auto x = a.with_prefix(prefix), y = b.with_prefix(prefix);
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].first != y[i].first) return false;
    const auto u = x[i].second.data(), v = y[i].second.data();
    if (!std::equal(u.begin(), u.end(), v.begin(), v.end())) return false;
  }
  return true;
}

TEST(TrainTest, ZeroEpochsKeepsTheInitialisation) {
  const Dataset& ds = small_dataset();
  const TrainConfig c = quick(Task::kFib, 0);
  const TrainResult r = train(ds, c);
  const TaskModel fresh = TaskModel::create(fit_to_dataset(c.model, ds), ds.candidate_ids(), c.seed);
  EXPECT_TRUE(same_values(r.model.store, fresh.store));
  ASSERT_EQ(r.history.size(), 2u);
  EXPECT_EQ(r.history[0].epoch, 0u);
  EXPECT_EQ(r.history[0].split, "train");
  EXPECT_DOUBLE_EQ(r.history[0].loss, r.initial_loss);
  EXPECT_EQ(r.best_epoch, 0u);
}

TEST(TrainTest, SameSeedGivesBitwiseIdenticalParameters) {
  const Dataset& ds = small_dataset();
  TrainConfig c = quick(Task::kDescription, 2);
  c.model.dropout = 0.3;
  const TrainResult a = train(ds, c);
  const TrainResult b = train(ds, c);
  EXPECT_TRUE(same_values(a.model.store, b.model.store));
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].loss, b.history[i].loss);
}

TEST(TrainTest, TransferCopiesTheDetectorBitwise) {
  const Dataset& ds = small_dataset();
  const TrainResult concept_run = train(ds, quick(Task::kConcept, 1));
  const auto dir = testing::temp_dir("transfer");
  const std::string ckpt = (dir / "detector.ctsn").string();
  save_checkpoint(ckpt, concept_run.model.store.entries());
  TrainConfig c = quick(Task::kMultipleChoice, 0);
  c.seed = 99;
  c.transfer = ckpt;
  const TrainResult r = train(ds, c);
  EXPECT_TRUE(same_values(r.model.store, concept_run.model.store, "detector."));
  c.transfer = (dir / "missing.ctsn").string();
  EXPECT_ANY_THROW(train(ds, c));
  std::filesystem::remove_all(dir);
}

TEST(TrainTest, OneSmallStepLowersTheBatchLoss) {
  PrecisionScope f64(Precision::kF64);
  const Dataset& ds = small_dataset();
  const ClipBank bank(ds);
  const auto split = ds.split("train");
  const std::vector<const Example*> batch(split.begin(), split.begin() + 4);
  int decreased = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const ModelConfig mc = fit_to_dataset(small_model(Task::kFib), ds);
    TaskModel m = TaskModel::create(mc, ds.candidate_ids(), seed);
    const auto params = m.trainable();
    Adam adam(params, {.lr = 1e-6});
    double before = 0.0;
    {
      Tape tape;
      TapeScope scope(tape);
      ensure_grads(params);
      const Tensor loss = batch_loss(m, ds, bank, batch, {});
      before = loss.item();
      tape.backward(loss);
    }
    adam.step();
    NoTapeScope off;
    const double after = batch_loss(m, ds, bank, batch, {}).item();
    if (after < before) ++decreased;
  }
  EXPECT_GE(decreased, 9);
}

TEST(TrainTest, PatienceStopsAStalledRun) {
  const Dataset& ds = small_dataset();
  TrainConfig c = quick(Task::kMultipleChoice, 10);
  c.lr = 0.0;
  c.patience = 2;
  std::vector<EpochRecord> logged;
  const TrainResult r = train(ds, c, [&](const EpochRecord& e) { logged.push_back(e); });
  // Epoch 0 plus two stalled epochs, each with a train and a val row.
  EXPECT_EQ(r.history.size(), 6u);
  EXPECT_EQ(logged.size(), r.history.size());
  EXPECT_EQ(r.history.back().epoch, 2u);
  EXPECT_EQ(r.best_epoch, 0u);
  EXPECT_EQ(r.metric, "accuracy");
}

TEST(TrainTest, RejectsMismatchedTaskSettings) {
  const Dataset& ds = small_dataset();
  TrainConfig c = quick(Task::kRetrieval, 1);
  c.batch_size = 1;
  EXPECT_THROW(train(ds, c), UsageError);
  TrainConfig missing = quick(Task::kFib, 1);
  missing.val_split = "nothing";
  EXPECT_THROW(train(ds, missing), UsageError);
}

TEST(TrainTest, RetrievalTrainingRuns) {
  const Dataset& ds = small_dataset();
  TrainConfig c = quick(Task::kRetrieval, 1);
  c.model.finetune_detector = false;
  const TrainResult r = train(ds, c);
  EXPECT_EQ(r.metric, "medr");
  EXPECT_TRUE(std::isfinite(r.history.back().loss));
}

TEST(ModelIoTest, SavedModelReloadsWithIdenticalOutputs) {
  const Dataset& ds = small_dataset();
  const TrainResult r = train(ds, quick(Task::kFib, 1));
  const auto dir = testing::temp_dir("model_io");
  save_model(r.model, dir.string());
  const TaskModel back = load_model(dir.string());
  EXPECT_TRUE(same_values(back.store, r.model.store));
  EXPECT_EQ(back.candidate_words, r.model.candidate_words);
  const ClipBank bank(ds);
  const auto val = ds.split("val");
  for (const Example* ex : val) {
    const auto s = sentence_ids(ds, ex->fib_sentence);
    const auto p = fib_predict(r.model, prepare_clip(r.model, bank.clip(*ex), {}), s);
    const auto q = fib_predict(back, prepare_clip(back, bank.clip(*ex), {}), s);
    EXPECT_EQ(p, q);
  }
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace ctsan
