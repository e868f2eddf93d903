#include "ctsan/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <sstream>

#include "ctsan/errors.hpp"
#include "ctsan/ops.hpp"

namespace ctsan {

Adam::Adam(std::vector<NamedTensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step() {
  for (const auto& [name, t] : params_) {
    if (!t.has_grad()) throw UsageError("Adam: parameter " + name + " has no gradient");
  }
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const bool f32 = current_precision() == Precision::kF32;
  for (std::size_t p = 0; p < params_.size(); ++p) {
    const Tensor& t = params_[p].second;
    const auto g = t.grad();
    const auto w = t.mutable_data();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double update = options_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps);
      w[i] -= update;
      if (f32) w[i] = static_cast<double>(static_cast<float>(w[i]));
    }
    t.zero_grad();
  }
}

double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& [name, t] : params) {
      if (!t.has_grad()) continue;
      for (double& g : t.mutable_grad()) g *= s;
    }
  }
  return norm;
}

void ensure_grads(const std::vector<NamedTensor>& params) {
  for (const auto& [name, t] : params) t.mutable_grad();
}

namespace {

struct TrainField {
  std::string key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

std::string number(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

const std::vector<TrainField>& train_fields() {
  static const std::vector<TrainField> table = {
      {"lr", [](const TrainConfig& c) { return number(c.lr); },
       [](TrainConfig& c, const std::string& v) { c.lr = parse_double("lr", v); }},
      {"batch_size", [](const TrainConfig& c) { return std::to_string(c.batch_size); },
       [](TrainConfig& c, const std::string& v) { c.batch_size = parse_uint("batch_size", v); }},
      {"epochs", [](const TrainConfig& c) { return std::to_string(c.epochs); },
       [](TrainConfig& c, const std::string& v) { c.epochs = parse_uint("epochs", v); }},
      {"seed", [](const TrainConfig& c) { return std::to_string(c.seed); },
       [](TrainConfig& c, const std::string& v) { c.seed = parse_uint("seed", v); }},
      {"clip_norm", [](const TrainConfig& c) { return number(c.clip_norm); },
       [](TrainConfig& c, const std::string& v) { c.clip_norm = parse_double("clip_norm", v); }},
      {"patience", [](const TrainConfig& c) { return std::to_string(c.patience); },
       [](TrainConfig& c, const std::string& v) { c.patience = parse_uint("patience", v); }},
      {"transfer", [](const TrainConfig& c) { return c.transfer; },
       [](TrainConfig& c, const std::string& v) { c.transfer = v; }},
      {"precision", [](const TrainConfig& c) { return precision_name(c.precision); },
       [](TrainConfig& c, const std::string& v) { c.precision = parse_precision(v); }},
      {"threads", [](const TrainConfig& c) { return std::to_string(c.threads); },
       [](TrainConfig& c, const std::string& v) { c.threads = parse_uint("threads", v); }},
      {"max_frames", [](const TrainConfig& c) { return std::to_string(c.max_frames); },
       [](TrainConfig& c, const std::string& v) { c.max_frames = parse_uint("max_frames", v); }},
      {"train_limit", [](const TrainConfig& c) { return std::to_string(c.train_limit); },
       [](TrainConfig& c, const std::string& v) { c.train_limit = parse_uint("train_limit", v); }},
      {"eval_limit", [](const TrainConfig& c) { return std::to_string(c.eval_limit); },
       [](TrainConfig& c, const std::string& v) { c.eval_limit = parse_uint("eval_limit", v); }},
      {"train_split", [](const TrainConfig& c) { return c.train_split; },
       [](TrainConfig& c, const std::string& v) { c.train_split = v; }},
      {"val_split", [](const TrainConfig& c) { return c.val_split; },
       [](TrainConfig& c, const std::string& v) { c.val_split = v; }},
  };
  return table;
}

}  // namespace

void apply_train_keys(const KeyValues& kv, TrainConfig& config) {
  KeyValues rest;
  for (const auto& [k, v] : kv) {
    const auto& fields = train_fields();
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const TrainField& f) { return f.key == k; });
    if (it == fields.end()) {
      rest.emplace_back(k, v);
    } else {
      it->set(config, v);
    }
  }
  rest = apply_model_keys(rest, config.model);
  if (!rest.empty()) throw InputError("unknown configuration key " + rest.front().first);
}

KeyValues train_keys(const TrainConfig& config) {
  KeyValues out;
  for (const TrainField& f : train_fields()) out.emplace_back(f.key, f.get(config));
  for (auto& kv : model_keys(config.model)) out.push_back(std::move(kv));
  return out;
}

ModelConfig fit_to_dataset(ModelConfig model, const Dataset& dataset, std::size_t max_frames) {
  if (dataset.examples.empty()) throw UsageError("dataset has no examples");
  model.vocab_size = dataset.vocab.size();
  model.detector.candidates = dataset.candidates.size();
  const FeatureClip clip = dataset.load_clip(dataset.examples.front(), max_frames);
  model.detector.raw_channels = clip.frames.front().dim(2);
  return model;
}

namespace {

std::vector<int> caption_for(const TaskModel& model, const Dataset& dataset, const Example& ex) {
  std::vector<int> ids = sentence_ids(dataset, ex.caption);
  if (model.config.max_len > 0 && ids.size() >= model.config.max_len) ids.resize(model.config.max_len - 1);
  return ids;
}

Tensor example_loss(const TaskModel& model, const Dataset& dataset, const ClipBank& bank, const Example& ex,
                    const RunMode& mode) {
  const ModelConfig& cfg = model.config;
  const Detection det = bank.detection(model, ex);
  const std::vector<double> targets = dataset.concept_targets(ex);
  if (cfg.task == Task::kConcept) return concept_loss(det.confidence, targets);
  const ClipContext ctx = prepare_clip(model, det, mode);
  const Tensor conf = cfg.finetune_detector ? det.confidence : Tensor();
  switch (cfg.task) {
    case Task::kDescription: {
      const std::vector<int> caption = caption_for(model, dataset, ex);
      std::vector<int> gold = caption;
      gold.push_back(kEos);
      const DecoderOutput out = teacher_forced(model, ctx, caption, mode);
      return description_loss(out.log_probs, gold, out.beta, out.gamma, conf, targets, cfg.lambda1, cfg.lambda2);
    }
    case Task::kFib: {
      const FibOutput out = fib_forward(model, ctx, sentence_ids(dataset, ex.fib_sentence), mode);
      return fib_loss(out.log_probs, dataset.vocab.id(ex.fib_answer), out.beta, out.gamma, conf, targets,
                      cfg.lambda1, cfg.lambda2);
    }
    case Task::kMultipleChoice: {
      std::vector<Tensor> scores, gammas;
      for (const std::string& choice : ex.mc_choices) {
        PairScore s = mc_score(model, ctx, sentence_ids(dataset, choice), mode);
        scores.push_back(s.score);
        if (s.gamma.defined()) gammas.push_back(s.gamma);
      }
      return mc_loss(scores, static_cast<std::size_t>(ex.mc_answer), cfg.mc_margin, gammas, conf, targets,
                     cfg.lambda1, cfg.lambda2);
    }
    default:
      throw UsageError("example_loss: retrieval is scored per batch");
  }
}

Tensor retrieval_batch_loss(const TaskModel& model, const Dataset& dataset, const ClipBank& bank,
                            std::span<const Example* const> batch, const RunMode& mode) {
  const ModelConfig& cfg = model.config;
  const std::size_t b = batch.size();
  std::vector<ClipContext> ctxs;
  RetrievalBatch rb;
  for (const Example* ex : batch) {
    const Detection det = bank.detection(model, *ex);
    if (cfg.finetune_detector) {
      rb.confidences.push_back(det.confidence);
      rb.targets.push_back(dataset.concept_targets(*ex));
    }
    ctxs.push_back(prepare_clip(model, det, mode));
  }
  rb.scores.resize(b);
  for (std::size_t k = 0; k < b; ++k) {
    const std::vector<int> query = sentence_ids(dataset, batch[k]->caption);
    for (std::size_t l = 0; l < b; ++l) {
      PairScore s = retrieval_score(model, ctxs[l], query, mode);
      rb.scores[k].push_back(s.score);
      if (s.gamma.defined()) rb.gammas.push_back(s.gamma);
    }
  }
  return scale(retrieval_loss(rb, cfg.ret_margin, cfg.lambda1, cfg.lambda2), 1.0 / static_cast<double>(b));
}

std::vector<std::span<const Example* const>> batches(const std::vector<const Example*>& order, std::size_t size,
                                                     bool pairs) {
  std::vector<std::span<const Example* const>> out;
  const std::span<const Example* const> all(order);
  for (std::size_t i = 0; i < order.size(); i += size) {
    const auto part = all.subspan(i, std::min(size, order.size() - i));
    if (pairs && part.size() < 2) continue;
    out.push_back(part);
  }
  return out;
}

}  // namespace

Tensor batch_loss(const TaskModel& model, const Dataset& dataset, const ClipBank& bank,
                  std::span<const Example* const> batch, const RunMode& mode) {
  if (batch.empty()) throw UsageError("batch_loss: empty batch");
  if (model.config.task == Task::kRetrieval) return retrieval_batch_loss(model, dataset, bank, batch, mode);
  Tensor total;
  for (const Example* ex : batch) {
    Tensor l = example_loss(model, dataset, bank, *ex, mode);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

double split_loss(const TaskModel& model, const Dataset& dataset, const ClipBank& bank,
                  const std::vector<const Example*>& examples, std::size_t batch_size) {
  NoTapeScope off;
  const auto parts = batches(examples, std::max<std::size_t>(batch_size, 1), model.config.task == Task::kRetrieval);
  if (parts.empty()) throw UsageError("split_loss: no complete batch");
  double total = 0.0;
  for (const auto& part : parts) total += batch_loss(model, dataset, bank, part, {}).item();
  return total / static_cast<double>(parts.size());
}

std::vector<std::vector<double>> snapshot(const ParamStore& store) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : store.entries()) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

void restore(const ParamStore& store, const std::vector<std::vector<double>>& values) {
  if (values.size() != store.size()) throw UsageError("restore: snapshot does not match the store");
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto w = store.entries()[i].second.mutable_data();
    if (w.size() != values[i].size()) throw UsageError("restore: snapshot does not match the store");
    std::copy(values[i].begin(), values[i].end(), w.begin());
  }
}

namespace {

void check_task_data(const TrainConfig& config, const std::vector<const Example*>& train_set,
                     const std::vector<const Example*>& val_set) {
  if (train_set.empty()) throw UsageError("no examples in split '" + config.train_split + "'");
  if (val_set.empty()) throw UsageError("no examples in split '" + config.val_split + "'");
  if (config.batch_size == 0) throw UsageError("batch_size must be positive");
  auto each = [&](const std::function<bool(const Example&)>& ok, const std::string& what) {
    for (const auto* set : {&train_set, &val_set}) {
      for (const Example* ex : *set) {
        if (!ok(*ex)) throw UsageError("example " + ex->id + " has no " + what + " for the " +
                                       task_name(config.model.task) + " task");
      }
    }
  };
  switch (config.model.task) {
    case Task::kConcept:
      each([](const Example& e) { return !e.planted.empty(); }, "planted concepts");
      break;
    case Task::kDescription:
      each([](const Example& e) { return !e.caption.empty(); }, "caption");
      break;
    case Task::kFib:
      each([](const Example& e) { return !e.fib_sentence.empty() && !e.fib_answer.empty(); }, "blank sentence");
      break;
    case Task::kMultipleChoice:
      each([](const Example& e) {
        return e.mc_choices.size() >= 2 && e.mc_answer >= 0 &&
               static_cast<std::size_t>(e.mc_answer) < e.mc_choices.size();
      }, "choices");
      break;
    case Task::kRetrieval:
      each([](const Example& e) { return !e.caption.empty(); }, "caption");
      if (config.batch_size < 2) throw UsageError("retrieval needs batch_size of at least 2");
      if (train_set.size() < 2 || val_set.size() < 2) throw UsageError("retrieval needs two examples per split");
      break;
  }
}

bool better(double a, double b, bool higher) { return higher ? a > b : a < b; }

}  // namespace

TrainResult train(const Dataset& dataset, const TrainConfig& config, const TrainLog& log) {
  const ClipBank bank(dataset, config.max_frames, config.threads);
  return train(dataset, bank, config, log);
}

TrainResult train(const Dataset& dataset, const ClipBank& bank, const TrainConfig& config, const TrainLog& log) {
  PrecisionScope precision(config.precision);
  std::vector<const Example*> train_set = dataset.split(config.train_split);
  if (config.train_limit > 0 && train_set.size() > config.train_limit) train_set.resize(config.train_limit);
  std::vector<const Example*> val_set = dataset.split(config.val_split);
  if (config.eval_limit > 0 && val_set.size() > config.eval_limit) val_set.resize(config.eval_limit);
  check_task_data(config, train_set, val_set);

  const ModelConfig model_config = fit_to_dataset(config.model, dataset, config.max_frames);
  TrainResult result{TaskModel::create(model_config, dataset.candidate_ids(), config.seed), {}, 0, 0.0, 0.0, ""};
  TaskModel& model = result.model;
  if (!config.transfer.empty()) {
    if (assign_from(model.store, load_checkpoint(config.transfer), "detector.") == 0) {
      throw UsageError("transfer checkpoint " + config.transfer + " holds no detector tensors");
    }
  }
  const bool pairs = model_config.task == Task::kRetrieval;
  const std::vector<NamedTensor> params = model.trainable();
  Adam adam(params, AdamOptions{.lr = config.lr});
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  const RunMode training{true, &rng};

  auto record = [&](EpochRecord r) {
    result.history.push_back(r);
    if (log) log(result.history.back());
  };
  auto validate = [&](std::size_t epoch) {
    const TaskEvaluation ev = evaluate_task(model, dataset, bank, val_set, config.threads);
    result.metric = ev.metric;
    record({epoch, config.val_split, split_loss(model, dataset, bank, val_set, config.batch_size), ev.value});
    return ev;
  };

  result.initial_loss = split_loss(model, dataset, bank, train_set, config.batch_size);
  record({0, config.train_split, result.initial_loss, std::numeric_limits<double>::quiet_NaN()});
  const TaskEvaluation first = validate(0);
  const bool higher = first.higher_is_better;
  result.best_metric = first.value;
  auto best = snapshot(model.store);

  std::vector<const Example*> order = train_set;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    const auto parts = batches(order, config.batch_size, pairs);
    for (const auto& part : parts) {
      Tape tape;
      {
        TapeScope scope(tape);
        ensure_grads(params);
        const Tensor loss = batch_loss(model, dataset, bank, part, training);
        tape.backward(loss);
        total += loss.item();
      }
      if (config.clip_norm > 0.0) clip_grad_norm(params, config.clip_norm);
      adam.step();
    }
    record({epoch, config.train_split, total / static_cast<double>(std::max<std::size_t>(parts.size(), 1)),
            std::numeric_limits<double>::quiet_NaN()});
    const TaskEvaluation ev = validate(epoch);
    if (better(ev.value, result.best_metric, higher)) {
      result.best_metric = ev.value;
      result.best_epoch = epoch;
      best = snapshot(model.store);
      stale = 0;
    } else if (config.patience > 0 && ++stale >= config.patience) {
      break;
    }
  }
  restore(model.store, best);
  return result;
}

void save_model(const TaskModel& model, const std::string& dir) {
  std::filesystem::create_directories(dir);
  save_checkpoint((std::filesystem::path(dir) / "model.ctsn").string(), model.store.entries());
  KeyValues kv = model_keys(model.config);
  std::string ids;
  for (std::size_t i = 0; i < model.candidate_words.size(); ++i) {
    ids += (i ? "," : "") + std::to_string(model.candidate_words[i]);
  }
  kv.emplace_back("candidate_words", ids);
  write_text_file((std::filesystem::path(dir) / "model.cfg").string(), format_key_values(kv));
}

TaskModel load_model(const std::string& dir) {
  const KeyValues kv = parse_key_values(read_text_file((std::filesystem::path(dir) / "model.cfg").string()));
  ModelConfig config;
  KeyValues rest = apply_model_keys(kv, config);
  std::vector<int> candidates;
  for (const auto& [k, v] : rest) {
    if (k != "candidate_words") throw InputError("model.cfg: unknown key " + k);
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) candidates.push_back(static_cast<int>(parse_uint("candidate_words", item)));
    }
  }
  TaskModel model = TaskModel::create(config, std::move(candidates), 0);
  assign_from(model.store, load_checkpoint((std::filesystem::path(dir) / "model.ctsn").string()));
  return model;
}

}  // namespace ctsan
