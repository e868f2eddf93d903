#pragma once

// Optimisation: Adam, gradient clipping, the epoch loop with validation and
// early stopping, and model directories on disk.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctsan/config.hpp"
#include "ctsan/eval.hpp"

namespace ctsan {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamOptions options);

  // One bias-corrected update from the current gradients, which are then
  // zeroed. Every parameter must hold a gradient buffer.
  void step();
  std::size_t steps() const { return t_; }
  const std::vector<NamedTensor>& params() const { return params_; }

 private:
  std::vector<NamedTensor> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Rescales all gradients together so their joint L2 norm is at most
// max_norm. Returns the norm before clipping.
double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm);

// Gives every parameter a (zeroed) gradient buffer so parameters the loss
// does not reach still take part in the update.
void ensure_grads(const std::vector<NamedTensor>& params);

struct TrainConfig {
  ModelConfig model;
  double lr = 1e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 30;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;  // 0 disables clipping
  std::size_t patience = 5;
  std::string transfer;  // checkpoint whose detector.* tensors seed the detector
  Precision precision = Precision::kF32;
  std::size_t threads = 1;
  std::size_t max_frames = kMaxFrames;
  std::size_t train_limit = 0;  // leading training examples used, 0 for all
  std::size_t eval_limit = 0;   // validation examples per epoch, 0 for all
  std::string train_split = "train";
  std::string val_split = "val";
};

// Applies training and model keys; anything unrecognised raises InputError.
void apply_train_keys(const KeyValues& kv, TrainConfig& config);
KeyValues train_keys(const TrainConfig& config);

// Copies vocabulary size, candidate count and the clip's channel count from
// the dataset into the model configuration.
ModelConfig fit_to_dataset(ModelConfig model, const Dataset& dataset, std::size_t max_frames = kMaxFrames);

// Mean per-example loss of one batch; retrieval scores every query against
// every clip of the batch and divides the batch loss by its size.
Tensor batch_loss(const TaskModel& model, const Dataset& dataset, const ClipBank& bank,
                  std::span<const Example* const> batch, const RunMode& mode);

// Average batch loss over `examples` with dropout off, in order.
double split_loss(const TaskModel& model, const Dataset& dataset, const ClipBank& bank,
                  const std::vector<const Example*>& examples, std::size_t batch_size);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double metric = 0.0;  // NaN where not measured
};

struct TrainResult {
  TaskModel model;  // holds the best validation parameters
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  double initial_loss = 0.0;  // training split, before any update
  std::string metric;
};

using TrainLog = std::function<void(const EpochRecord&)>;

TrainResult train(const Dataset& dataset, const TrainConfig& config, const TrainLog& log = {});
// Same, reusing clips already in memory.
TrainResult train(const Dataset& dataset, const ClipBank& bank, const TrainConfig& config,
                  const TrainLog& log = {});

// Parameter values, for restoring a model to an earlier state.
std::vector<std::vector<double>> snapshot(const ParamStore& store);
void restore(const ParamStore& store, const std::vector<std::vector<double>>& values);

// A model directory holds model.ctsn (all parameters) and model.cfg (model
// keys plus the candidate word ids).
void save_model(const TaskModel& model, const std::string& dir);
TaskModel load_model(const std::string& dir);

}  // namespace ctsan
