#pragma once

// Metrics (accuracy, Recall@k, median rank, corpus BLEU) and per-task
// evaluation of a model on a dataset split.

#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "ctsan/corpus.hpp"
#include "ctsan/models.hpp"

namespace ctsan {

double accuracy(std::span<const int> predictions, std::span<const int> golds);

// Rows are queries; the ground truth of row r is column r. Candidates rank by
// descending score, ties by ascending column. Ranks are 1-based.
std::size_t gt_rank(const SimilarityMatrix& m, std::size_t row);
std::vector<std::size_t> gt_ranks(const SimilarityMatrix& m);
double recall_at_k(const SimilarityMatrix& m, std::size_t k);
// Lower middle element for an even number of queries.
double median_rank(const SimilarityMatrix& m);

using Sentence = std::vector<std::string>;

// Corpus-level BLEU-n: clipped n-gram precisions pooled over the corpus,
// geometric mean over orders 1..n, brevity penalty against the closest
// reference length (shorter wins ties). No smoothing.
double bleu(const std::vector<Sentence>& candidates, const std::vector<std::vector<Sentence>>& references, int n);
double bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references, int n);

// Feature clips of a dataset held in memory, plus detections of frozen
// detectors. Safe to read from several threads.
class ClipBank {
 public:
  explicit ClipBank(const Dataset& dataset, std::size_t max_frames = kMaxFrames, std::size_t threads = 1);

  const FeatureClip& clip(const Example& example) const;
  // Cached per example while the detector is frozen; recomputed otherwise.
  Detection detection(const TaskModel& model, const Example& example) const;
  void clear_detections() const;

 private:
  std::map<std::string, FeatureClip> clips_;
  struct Cache {
    std::weak_ptr<detail::Node> owner;  // detects a detector freed and its address reused
    std::map<std::string, Detection> detections;
  };
  mutable std::mutex mutex_;
  mutable std::map<const void*, Cache> caches_;
};

// Token ids of the example's texts under the dataset vocabulary.
std::vector<int> sentence_ids(const Dataset& dataset, const std::string& text);

std::vector<double> mc_scores(const TaskModel& model, const ClipContext& ctx,
                              const std::vector<std::vector<int>>& choices);
// Index of the highest score, ties to the lower index.
std::size_t argmax(std::span<const double> values);
// Most likely word outside the reserved ids.
int best_word(std::span<const double> distribution);

// Rows score each example's caption against the clips of all examples.
SimilarityMatrix retrieval_matrix(const TaskModel& model, const Dataset& dataset, const ClipBank& bank,
                                  const std::vector<const Example*>& examples, std::size_t threads = 1);

// Ensembles average the members' outputs: word distributions at every
// decoding step, blank distributions, choice scores, similarity matrices or
// concept confidences. Members must share the task and vocabulary.
std::vector<double> mean_of(const std::vector<std::vector<double>>& rows);
SimilarityMatrix mean_of(const std::vector<SimilarityMatrix>& matrices);

// contexts[m] is the clip as prepared for models[m].
Description describe_ensemble(const std::vector<const TaskModel*>& models, const std::vector<ClipContext>& contexts,
                              std::size_t max_len);

SimilarityMatrix retrieval_matrix(const std::vector<const TaskModel*>& models, const Dataset& dataset,
                                  const ClipBank& bank, const std::vector<const Example*>& examples,
                                  std::size_t threads = 1);

struct TaskEvaluation {
  std::string metric;
  double value = 0.0;
  bool higher_is_better = true;
  std::vector<std::pair<std::string, double>> extra;
};

// concept: planted-word recall in the top K; desc: exact-sentence match;
// fib and mc: accuracy; ret: median rank over the split.
TaskEvaluation evaluate_task(const TaskModel& model, const Dataset& dataset, const ClipBank& bank,
                             const std::vector<const Example*>& examples, std::size_t threads = 1);
TaskEvaluation evaluate_ensemble(const std::vector<const TaskModel*>& models, const Dataset& dataset,
                                 const ClipBank& bank, const std::vector<const Example*>& examples,
                                 std::size_t threads = 1);

}  // namespace ctsan
