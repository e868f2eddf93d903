#include "ctsan/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "ctsan/errors.hpp"

namespace ctsan {

double accuracy(std::span<const int> predictions, std::span<const int> golds) {
  if (predictions.size() != golds.size()) throw UsageError("accuracy: prediction and gold counts differ");
  if (predictions.empty()) throw UsageError("accuracy: no examples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == golds[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

namespace {

void require_square(const SimilarityMatrix& m) {
  if (m.rows() == 0) throw UsageError("similarity matrix is empty");
  if (m.rows() != m.cols() || m.scores.size() != m.rows() * m.cols()) {
    throw UsageError("similarity matrix must be square with one score per entry");
  }
}

}  // namespace

std::size_t gt_rank(const SimilarityMatrix& m, std::size_t row) {
  require_square(m);
  if (row >= m.rows()) throw UsageError("gt_rank: row out of range");
  const double gt = m.at(row, row);
  std::size_t rank = 1;
  for (std::size_t c = 0; c < m.cols(); ++c) {
    const double s = m.at(row, c);
    if (s > gt || (s == gt && c < row)) ++rank;
  }
  return rank;
}

std::vector<std::size_t> gt_ranks(const SimilarityMatrix& m) {
  require_square(m);
  std::vector<std::size_t> ranks(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) ranks[r] = gt_rank(m, r);
  return ranks;
}

double recall_at_k(const SimilarityMatrix& m, std::size_t k) {
  if (k < 1) throw UsageError("recall_at_k: k must be at least 1");
  const auto ranks = gt_ranks(m);
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double median_rank(const SimilarityMatrix& m) {
  auto ranks = gt_ranks(m);
  std::sort(ranks.begin(), ranks.end());
  return static_cast<double>(ranks[(ranks.size() - 1) / 2]);
}

namespace {

using NGramCounts = std::map<std::vector<std::string>, std::size_t>;

NGramCounts ngrams(const Sentence& s, std::size_t n) {
  NGramCounts out;
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[Sentence(s.begin() + i, s.begin() + i + n)];
  return out;
}

}  // namespace

double bleu(const std::vector<Sentence>& candidates, const std::vector<std::vector<Sentence>>& references, int n) {
  if (n < 1) throw UsageError("bleu: n must be at least 1");
  if (candidates.size() != references.size()) throw UsageError("bleu: candidate and reference counts differ");
  if (candidates.empty()) throw UsageError("bleu: empty corpus");
  const auto order = static_cast<std::size_t>(n);
  std::vector<double> matched(order, 0.0), total(order, 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& refs = references[i];
    if (refs.empty()) throw UsageError("bleu: example " + std::to_string(i) + " has no reference");
    for (const Sentence& r : refs) {
      if (r.empty()) throw UsageError("bleu: empty reference for example " + std::to_string(i));
    }
    const Sentence& cand = candidates[i];
    cand_len += static_cast<double>(cand.size());
    std::size_t best = refs.front().size();
    for (const Sentence& r : refs) {
      const auto d = [&](std::size_t len) { return len > cand.size() ? len - cand.size() : cand.size() - len; };
      if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (std::size_t k = 1; k <= order; ++k) {
      const NGramCounts cand_counts = ngrams(cand, k);
      NGramCounts max_ref;
      for (const Sentence& r : refs) {
        for (const auto& [g, c] : ngrams(r, k)) max_ref[g] = std::max(max_ref[g], c);
      }
      for (const auto& [g, c] : cand_counts) {
        const auto it = max_ref.find(g);
        matched[k - 1] += static_cast<double>(std::min(c, it == max_ref.end() ? 0 : it->second));
        total[k - 1] += static_cast<double>(c);
      }
    }
  }
  double log_sum = 0.0;
  for (std::size_t k = 0; k < order; ++k) {
    if (matched[k] == 0.0) return 0.0;
    log_sum += std::log(matched[k] / total[k]);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum / static_cast<double>(order));
}

double bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references, int n) {
  std::vector<std::vector<Sentence>> refs;
  refs.reserve(references.size());
  for (const Sentence& r : references) refs.push_back({r});
  return bleu(candidates, refs, n);
}

ClipBank::ClipBank(const Dataset& dataset, std::size_t max_frames, std::size_t threads) {
  std::vector<const Example*> todo;
  for (const Example& ex : dataset.examples) todo.push_back(&ex);
  std::vector<FeatureClip> loaded(todo.size());
  parallel_for(todo.size(), threads, [&](std::size_t i) { loaded[i] = dataset.load_clip(*todo[i], max_frames); });
  for (std::size_t i = 0; i < todo.size(); ++i) clips_.emplace(todo[i]->id, std::move(loaded[i]));
}

const FeatureClip& ClipBank::clip(const Example& example) const {
  const auto it = clips_.find(example.id);
  if (it == clips_.end()) throw UsageError("no clip loaded for " + example.id);
  return it->second;
}

Detection ClipBank::detection(const TaskModel& model, const Example& example) const {
  const bool cacheable = !model.config.finetune_detector && model.config.task != Task::kConcept;
  if (!cacheable) return run_detection(model, clip(example));
  const auto& node = model.detector.reduce_kernel.node();
  {
    std::lock_guard lock(mutex_);
    Cache& cache = caches_[node.get()];
    if (cache.owner.lock() != node) cache = Cache{node, {}};
    const auto it = cache.detections.find(example.id);
    if (it != cache.detections.end()) return it->second;
  }
  Detection d = run_detection(model, clip(example));
  std::lock_guard lock(mutex_);
  Cache& cache = caches_[node.get()];
  if (cache.owner.lock() == node) cache.detections.emplace(example.id, d);
  return d;
}

void ClipBank::clear_detections() const {
  std::lock_guard lock(mutex_);
  caches_.clear();
}

std::vector<int> sentence_ids(const Dataset& dataset, const std::string& text) {
  return caption_ids(tokenize(text), dataset.vocab);
}

std::vector<double> mc_scores(const TaskModel& model, const ClipContext& ctx,
                              const std::vector<std::vector<int>>& choices) {
  NoTapeScope off;
  std::vector<double> out;
  out.reserve(choices.size());
  for (const auto& c : choices) out.push_back(mc_score(model, ctx, c, {}).score.item());
  return out;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw UsageError("argmax: no values");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

int best_word(std::span<const double> distribution) {
  if (distribution.size() <= kReservedCount) throw UsageError("best_word: no ordinary words");
  return static_cast<int>(kReservedCount + argmax(distribution.subspan(kReservedCount)));
}

std::vector<double> mean_of(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw UsageError("mean_of: nothing to average");
  std::vector<double> out(rows.front().size(), 0.0);
  for (const auto& r : rows) {
    if (r.size() != out.size()) throw UsageError("mean_of: members disagree on length");
    for (std::size_t i = 0; i < r.size(); ++i) out[i] += r[i];
  }
  for (double& v : out) v /= static_cast<double>(rows.size());
  return out;
}

SimilarityMatrix mean_of(const std::vector<SimilarityMatrix>& matrices) {
  if (matrices.empty()) throw UsageError("mean_of: nothing to average");
  std::vector<std::vector<double>> rows;
  for (const SimilarityMatrix& m : matrices) {
    if (m.row_ids != matrices.front().row_ids || m.col_ids != matrices.front().col_ids) {
      throw UsageError("mean_of: similarity matrices cover different ids");
    }
    rows.push_back(m.scores);
  }
  SimilarityMatrix out = matrices.front();
  out.scores = mean_of(rows);
  return out;
}

namespace {

void require_members(const std::vector<const TaskModel*>& models) {
  if (models.empty()) throw UsageError("ensemble has no members");
  for (const TaskModel* m : models) {
    if (m->config.task != models.front()->config.task) throw UsageError("ensemble members differ in task");
    if (m->config.vocab_size != models.front()->config.vocab_size) {
      throw UsageError("ensemble members differ in vocabulary size");
    }
  }
}

std::vector<std::vector<ClipContext>> contexts(const std::vector<const TaskModel*>& models, const ClipBank& bank,
                                               const std::vector<const Example*>& examples, std::size_t threads) {
  std::vector<std::vector<ClipContext>> out(examples.size());
  parallel_for(examples.size(), threads, [&](std::size_t i) {
    for (const TaskModel* m : models) out[i].push_back(prepare_clip(*m, bank.detection(*m, *examples[i]), {}));
  });
  return out;
}

}  // namespace

Description describe_ensemble(const std::vector<const TaskModel*>& models, const std::vector<ClipContext>& contexts,
                              std::size_t max_len) {
  require_members(models);
  if (contexts.size() != models.size()) throw UsageError("describe_ensemble: one context per member expected");
  if (max_len == 0) throw UsageError("describe_ensemble: max_len must be positive");
  std::vector<DecoderState> states;
  for (const ClipContext& c : contexts) states.push_back(begin_decoding(c));
  Description out;
  while (out.tokens.size() < max_len) {
    std::vector<std::vector<double>> dists;
    for (std::size_t m = 0; m < models.size(); ++m) dists.push_back(decode_step(*models[m], contexts[m], states[m]));
    std::vector<double> mean = mean_of(dists);
    const int word = greedy_word(mean);
    for (DecoderState& s : states) s.prev = word;
    out.tokens.push_back(word);
    out.steps.push_back(std::move(mean));
    if (word == kEos) break;
  }
  return out;
}

SimilarityMatrix retrieval_matrix(const TaskModel& model, const Dataset& dataset, const ClipBank& bank,
                                  const std::vector<const Example*>& examples, std::size_t threads) {
  return retrieval_matrix(std::vector<const TaskModel*>{&model}, dataset, bank, examples, threads);
}

SimilarityMatrix retrieval_matrix(const std::vector<const TaskModel*>& models, const Dataset& dataset,
                                  const ClipBank& bank, const std::vector<const Example*>& examples,
                                  std::size_t threads) {
  require_members(models);
  if (models.front()->config.task != Task::kRetrieval) throw UsageError("retrieval_matrix: not a retrieval model");
  const auto ctxs = contexts(models, bank, examples, threads);
  std::vector<std::vector<int>> queries;
  std::vector<std::string> ids;
  for (const Example* ex : examples) {
    queries.push_back(sentence_ids(dataset, ex->caption));
    ids.push_back(ex->id);
  }
  std::vector<SimilarityMatrix> per_model;
  for (std::size_t m = 0; m < models.size(); ++m) {
    per_model.push_back(similarity_matrix(ids, ids, [&](std::size_t r, std::size_t c) {
      return retrieval_score(*models[m], ctxs[c][m], queries[r], {}).score.item();
    }, threads));
  }
  return mean_of(per_model);
}

TaskEvaluation evaluate_task(const TaskModel& model, const Dataset& dataset, const ClipBank& bank,
                             const std::vector<const Example*>& examples, std::size_t threads) {
  return evaluate_ensemble({&model}, dataset, bank, examples, threads);
}

TaskEvaluation evaluate_ensemble(const std::vector<const TaskModel*>& models, const Dataset& dataset,
                                 const ClipBank& bank, const std::vector<const Example*>& examples,
                                 std::size_t threads) {
  require_members(models);
  if (examples.empty()) throw UsageError("evaluate: no examples");
  const std::size_t n = examples.size();
  const ModelConfig& cfg = models.front()->config;
  TaskEvaluation out;
  switch (cfg.task) {
    case Task::kConcept: {
      std::map<std::string, std::size_t> index;
      for (std::size_t i = 0; i < dataset.candidates.size(); ++i) index.emplace(dataset.candidates[i], i);
      std::vector<std::size_t> hits(n, 0), planted(n, 0);
      parallel_for(n, threads, [&](std::size_t i) {
        std::vector<std::vector<double>> confs;
        for (const TaskModel* m : models) {
          const Tensor c = bank.detection(*m, *examples[i]).confidence;
          confs.emplace_back(c.data().begin(), c.data().end());
        }
        const std::vector<double> mean = mean_of(confs);
        const ConceptSet top = top_k(Tensor::from({mean.size()}, mean), cfg.top_k);
        for (const std::string& w : examples[i]->planted) {
          ++planted[i];
          const auto it = index.find(w);
          if (it == index.end()) continue;
          if (std::find(top.candidates.begin(), top.candidates.end(), it->second) != top.candidates.end()) ++hits[i];
        }
      });
      std::size_t h = 0, p = 0;
      for (std::size_t i = 0; i < n; ++i) {
        h += hits[i];
        p += planted[i];
      }
      if (p == 0) throw UsageError("evaluate: no planted concepts in the split");
      out.metric = "recall@" + std::to_string(cfg.top_k);
      out.value = static_cast<double>(h) / static_cast<double>(p);
      break;
    }
    case Task::kDescription: {
      const auto ctxs = contexts(models, bank, examples, threads);
      std::vector<Sentence> hyps(n), refs(n);
      std::vector<int> exact(n, 0), ones(n, 1);
      parallel_for(n, threads, [&](std::size_t i) {
        const Description d = describe_ensemble(models, ctxs[i], cfg.max_len);
        exact[i] = d.words() == sentence_ids(dataset, examples[i]->caption) ? 1 : 0;
        for (int id : d.words()) hyps[i].push_back(dataset.vocab.word(id));
        refs[i] = tokenize(examples[i]->caption);
      });
      out.metric = "exact";
      out.value = accuracy(exact, ones);
      out.extra.emplace_back("bleu4", bleu(hyps, refs, 4));
      break;
    }
    case Task::kFib: {
      const auto ctxs = contexts(models, bank, examples, threads);
      std::vector<int> pred(n), gold(n);
      parallel_for(n, threads, [&](std::size_t i) {
        const std::vector<int> sentence = sentence_ids(dataset, examples[i]->fib_sentence);
        std::vector<std::vector<double>> dists;
        for (std::size_t m = 0; m < models.size(); ++m) dists.push_back(fib_predict(*models[m], ctxs[i][m], sentence));
        pred[i] = best_word(mean_of(dists));
        gold[i] = dataset.vocab.id(examples[i]->fib_answer);
      });
      out.metric = "accuracy";
      out.value = accuracy(pred, gold);
      break;
    }
    case Task::kMultipleChoice: {
      const auto ctxs = contexts(models, bank, examples, threads);
      std::vector<int> pred(n), gold(n);
      parallel_for(n, threads, [&](std::size_t i) {
        std::vector<std::vector<int>> choices;
        for (const std::string& c : examples[i]->mc_choices) choices.push_back(sentence_ids(dataset, c));
        std::vector<std::vector<double>> scores;
        for (std::size_t m = 0; m < models.size(); ++m) scores.push_back(mc_scores(*models[m], ctxs[i][m], choices));
        pred[i] = static_cast<int>(argmax(mean_of(scores)));
        gold[i] = examples[i]->mc_answer;
      });
      out.metric = "accuracy";
      out.value = accuracy(pred, gold);
      break;
    }
    case Task::kRetrieval: {
      const SimilarityMatrix m = retrieval_matrix(models, dataset, bank, examples, threads);
      out.metric = "medr";
      out.value = median_rank(m);
      out.higher_is_better = false;
      for (std::size_t k : {1, 5, 10}) out.extra.emplace_back("r@" + std::to_string(k), recall_at_k(m, k));
      break;
    }
  }
  return out;
}

}  // namespace ctsan
