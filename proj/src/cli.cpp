#include "ctsan/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "ctsan/config.hpp"
#include "ctsan/errors.hpp"
#include "ctsan/eval.hpp"
#include "ctsan/gradsuite.hpp"
#include "ctsan/train.hpp"

namespace ctsan {

const char* git_revision() { return CTSAN_GIT_REVISION; }

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct Options {
  std::string config;
  std::string out;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  std::string precision = "f32";
  bool seed_given = false;
  bool precision_given = false;

  std::string task;
  std::string data;
  std::string split = "test";
  std::string transfer;
  std::vector<std::string> models;
  std::string clip;
  std::string metric;
  std::size_t k = 1;
  int n = 4;
  std::string matrix;
  std::string pred;
  std::string gold;
};

json run_meta(std::uint64_t seed, const std::string& config_text) {
  return {{"seed", seed}, {"config_hash", hex64(fnv1a(config_text))}, {"revision", git_revision()}};
}

// Hash input for commands without a config file: their effective options.
std::string options_text(const KeyValues& kv) { return format_key_values(kv); }

void write_json(const std::string& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

void emit(const Options& o, std::ostream& out, const json& j) {
  if (!o.out.empty()) write_json(o.out, j);
  out << j.dump() << "\n";
}

std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
    parts.push_back(line.substr(start, tab - start));
  parts.push_back(line.substr(start));
  return parts;
}

std::vector<TaskModel> load_models(const std::vector<std::string>& dirs) {
  if (dirs.empty()) throw UsageError("at least one --model directory is required");
  std::vector<TaskModel> models;
  for (const auto& d : dirs) models.push_back(load_model(d));
  return models;
}

std::vector<const TaskModel*> pointers(const std::vector<TaskModel>& models) {
  std::vector<const TaskModel*> p;
  for (const auto& m : models) p.push_back(&m);
  return p;
}

std::string models_text(const std::vector<std::string>& dirs) {
  std::string text;
  for (const auto& d : dirs) text += read_text_file((fs::path(d) / "model.cfg").string());
  return text;
}

Dataset require_data(const Options& o) {
  if (o.data.empty()) throw UsageError("--data is required");
  return load_dataset(o.data);
}

std::vector<const Example*> require_split(const Dataset& ds, const std::string& split) {
  auto examples = ds.split(split);
  if (examples.empty()) throw InputError("dataset has no examples in split '" + split + "'");
  return examples;
}

json evaluation_json(const TaskEvaluation& ev) {
  json j{{"metric", ev.metric}, {"value", ev.value}, {"higher_is_better", ev.higher_is_better}};
  for (const auto& [k, v] : ev.extra) j[k] = v;
  return j;
}

// ---------------------------------------------------------------- commands

int cmd_gen(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw UsageError("gen needs --out <dir>");
  SyntheticSpec spec = o.config.empty() ? SyntheticSpec{} : parse_synthetic_spec(read_text_file(o.config));
  if (o.seed_given) spec.seed = o.seed;
  spec.validate();
  const SyntheticCorpus corpus = generate_synthetic(spec);
  write_dataset(corpus, o.out);
  const json j{{"command", "gen"},
               {"out", o.out},
               {"clips", corpus.items.size()},
               {"run", run_meta(spec.seed, format_synthetic_spec(spec))}};
  write_json((fs::path(o.out) / "run.json").string(), j);
  out << j.dump() << "\n";
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.out.empty()) throw UsageError("train needs --out <model dir>");
  TrainConfig cfg;
  if (!o.config.empty()) apply_train_keys(parse_key_values(read_text_file(o.config)), cfg);
  cfg.model.task = parse_task(o.task);
  if (o.seed_given) cfg.seed = o.seed;
  if (o.precision_given) cfg.precision = parse_precision(o.precision);
  if (!o.transfer.empty()) cfg.transfer = o.transfer;
  cfg.threads = o.threads;
  const Dataset ds = require_data(o);

  fs::create_directories(o.out);
  std::ofstream history(fs::path(o.out) / "history.jsonl");
  const TrainResult r = train(ds, cfg, [&](const EpochRecord& e) {
    const json row{{"epoch", e.epoch}, {"split", e.split}, {"loss", e.loss},
                   {"metric", std::isnan(e.metric) ? json(nullptr) : json(e.metric)}};
    history << row.dump() << "\n";
    err << row.dump() << "\n";
  });
  save_model(r.model, o.out);
  save_vocab(ds.vocab, (fs::path(o.out) / "vocab.txt").string());
  const std::string cfg_text = format_key_values(train_keys(cfg));
  write_text_file((fs::path(o.out) / "train.cfg").string(), cfg_text);

  const json j{{"command", "train"},
               {"task", task_name(cfg.model.task)},
               {"out", o.out},
               {"metric", r.metric},
               {"best_epoch", r.best_epoch},
               {"best_metric", r.best_metric},
               {"initial_loss", r.initial_loss},
               {"run", run_meta(cfg.seed, cfg_text)}};
  write_json((fs::path(o.out) / "run.json").string(), j);
  out << j.dump() << "\n";
  return kExitOk;
}

json detection_json(const Detection& d, const Vocabulary& vocab) {
  json words = json::array(), conf = json::array();
  for (std::size_t i = 0; i < d.concepts.size(); ++i) {
    words.push_back(vocab.word(d.concepts.words[i]));
    conf.push_back(d.concepts.confidences[i]);
  }
  return {{"words", words}, {"confidences", conf}};
}

int cmd_detect(const Options& o, std::ostream& out) {
  if (o.models.size() != 1) throw UsageError("detect needs exactly one --model");
  const TaskModel model = load_model(o.models[0]);
  const fs::path vocab_path = fs::path(o.models[0]) / "vocab.txt";
  std::optional<Dataset> ds;
  if (!o.data.empty()) ds = load_dataset(o.data);
  Vocabulary vocab;
  if (fs::exists(vocab_path)) {
    vocab = load_vocab(vocab_path.string());
  } else if (ds) {
    vocab = ds->vocab;
  } else {
    throw UsageError("the model has no vocab.txt; pass --data");
  }
  const json meta = run_meta(o.seed, models_text(o.models));

  std::ofstream file;
  if (!o.out.empty()) {
    file.open(o.out);
    if (!file) throw InputError("cannot write " + o.out);
  }
  std::ostream& sink = o.out.empty() ? out : file;
  NoTapeScope off;
  if (!o.clip.empty()) {
    const FeatureClip clip = load_features(o.clip);
    json j{{"clip", o.clip}};
    j.update(detection_json(run_detection(model, clip), vocab));
    j["run"] = meta;
    sink << j.dump() << "\n";
    return kExitOk;
  }
  if (!ds) throw UsageError("detect needs --clip <file> or --data <dir>");
  for (const Example* ex : require_split(*ds, o.split)) {
    json j{{"id", ex->id}};
    j.update(detection_json(run_detection(model, ds->load_clip(*ex)), vocab));
    j["planted"] = ex->planted;
    j["run"] = meta;
    sink << j.dump() << "\n";
  }
  return kExitOk;
}

SimilarityMatrix read_matrix(const std::string& path) {
  const auto tensors = load_checkpoint(path);
  const Tensor* t = nullptr;
  for (const auto& [name, value] : tensors)
    if (name == "similarity") t = &value;
  if (!t || t->rank() != 2) throw InputError(path + ": no 2-d tensor named 'similarity'");
  SimilarityMatrix m;
  const fs::path ids = path + ".ids.json";
  if (fs::exists(ids)) {
    const json j = json::parse(read_text_file(ids.string()));
    m.row_ids = j.at("rows").get<std::vector<std::string>>();
    m.col_ids = j.at("cols").get<std::vector<std::string>>();
    if (m.rows() != t->dim(0) || m.cols() != t->dim(1)) throw InputError(ids.string() + ": id counts do not match");
  } else {
    for (std::size_t r = 0; r < t->dim(0); ++r) m.row_ids.push_back(std::to_string(r));
    for (std::size_t c = 0; c < t->dim(1); ++c) m.col_ids.push_back(std::to_string(c));
  }
  m.scores.assign(t->data().begin(), t->data().end());
  return m;
}

json matrix_metric(const std::string& metric, const SimilarityMatrix& m, std::size_t k) {
  if (metric == "recall") return {{"metric", "recall@" + std::to_string(k)}, {"value", recall_at_k(m, k)}};
  if (metric == "medr") return {{"metric", "medr"}, {"value", median_rank(m)}};
  throw UsageError("a similarity matrix supports --metric recall or medr");
}

json file_metric(const Options& o) {
  const auto pred = read_lines(o.pred), gold = read_lines(o.gold);
  if (pred.size() != gold.size())
    throw InputError("--pred has " + std::to_string(pred.size()) + " lines, --gold " + std::to_string(gold.size()));
  if (o.metric == "acc") {
    std::map<std::string, int> ids;
    auto id = [&](const std::string& s) { return ids.emplace(s, static_cast<int>(ids.size())).first->second; };
    std::vector<int> p, g;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      p.push_back(id(pred[i]));
      g.push_back(id(gold[i]));
    }
    return {{"metric", "accuracy"}, {"value", accuracy(p, g)}};
  }
  if (o.metric == "bleu") {
    std::vector<Sentence> cands;
    std::vector<std::vector<Sentence>> refs;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      cands.push_back(tokenize(pred[i]));
      refs.emplace_back();
      for (const auto& r : split_tabs(gold[i])) refs.back().push_back(tokenize(r));
    }
    return {{"metric", "bleu" + std::to_string(o.n)}, {"value", bleu(cands, refs, o.n)}};
  }
  throw UsageError("--pred/--gold support --metric acc or bleu");
}

json model_metric(const Options& o) {
  const std::vector<TaskModel> models = load_models(o.models);
  const Dataset ds = require_data(o);
  const auto examples = require_split(ds, o.split);
  const ClipBank bank(ds, kMaxFrames, o.threads);
  const Task task = models[0].config.task;
  if (task == Task::kRetrieval) {
    const SimilarityMatrix m = retrieval_matrix(pointers(models), ds, bank, examples, o.threads);
    return matrix_metric(o.metric, m, o.k);
  }
  const TaskEvaluation ev = evaluate_ensemble(pointers(models), ds, bank, examples, o.threads);
  const std::map<Task, std::string> natural = {{Task::kConcept, "recall"},
                                               {Task::kDescription, "acc"},
                                               {Task::kFib, "acc"},
                                               {Task::kMultipleChoice, "acc"}};
  if (task == Task::kDescription && o.metric == "bleu") {
    for (const auto& [k, v] : ev.extra)
      if (k == "bleu4") return {{"metric", k}, {"value", v}};
  }
  if (natural.at(task) != o.metric)
    throw UsageError("--metric " + o.metric + " does not apply to a " + task_name(task) + " model");
  return {{"metric", ev.metric}, {"value", ev.value}};
}

int cmd_eval(const Options& o, std::ostream& out) {
  const int modes = !o.matrix.empty() + (!o.pred.empty() || !o.gold.empty()) + !o.models.empty();
  if (modes != 1) throw UsageError("eval takes exactly one of --matrix, --pred/--gold or --model");
  if (o.k < 1) throw UsageError("--k must be at least 1");
  json j;
  std::string inputs;
  if (!o.matrix.empty()) {
    j = matrix_metric(o.metric, read_matrix(o.matrix), o.k);
    inputs = o.matrix;
  } else if (o.models.empty()) {
    if (o.pred.empty() || o.gold.empty()) throw UsageError("--pred and --gold go together");
    j = file_metric(o);
    inputs = read_text_file(o.pred) + read_text_file(o.gold);
  } else {
    j = model_metric(o);
    inputs = models_text(o.models) + o.data + "\n" + o.split;
  }
  j["run"] = run_meta(o.seed, options_text({{"metric", o.metric},
                                            {"k", std::to_string(o.k)},
                                            {"n", std::to_string(o.n)},
                                            {"inputs", hex64(fnv1a(inputs))}}));
  emit(o, out, j);
  return kExitOk;
}

int cmd_ensemble(const Options& o, std::ostream& out) {
  const std::vector<TaskModel> models = load_models(o.models);
  const Dataset ds = require_data(o);
  const auto examples = require_split(ds, o.split);
  const ClipBank bank(ds, kMaxFrames, o.threads);
  json j = evaluation_json(evaluate_ensemble(pointers(models), ds, bank, examples, o.threads));
  j["members"] = models.size();
  j["task"] = task_name(models[0].config.task);
  j["run"] = run_meta(o.seed, models_text(o.models) + o.split);
  emit(o, out, j);
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  if (o.precision_given && parse_precision(o.precision) != Precision::kF64)
    throw UsageError("gradcheck compares against finite differences and needs --precision f64");
  const Task task = parse_task(o.task);
  const GradCheckReport r = check_task_gradients(task, o.seed);
  json params = json::array();
  for (const auto& p : r.params)
    params.push_back({{"name", p.name},
                      {"count", p.count},
                      {"max_rel_error", p.max_rel_error},
                      {"max_abs_error", p.max_abs_error}});
  const json j{{"command", "gradcheck"},
               {"model", task_name(task)},
               {"precision", "f64"},
               {"passed", r.passed},
               {"max_rel_error", r.max_rel_error},
               {"tolerance", r.tolerance},
               {"params", params},
               {"run", run_meta(o.seed, format_key_values(model_keys(tiny_config(task))))}};
  emit(o, out, j);
  return r.passed ? kExitOk : kExitCheckFailed;
}

int cmd_simmatrix(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw UsageError("simmatrix needs --out <file>");
  const std::vector<TaskModel> models = load_models(o.models);
  if (models[0].config.task != Task::kRetrieval) throw UsageError("simmatrix needs retrieval models");
  const Dataset ds = require_data(o);
  const auto examples = require_split(ds, o.split);
  const ClipBank bank(ds, kMaxFrames, o.threads);
  const SimilarityMatrix m = retrieval_matrix(pointers(models), ds, bank, examples, o.threads);
  save_checkpoint(o.out, {{"similarity", Tensor::from({m.rows(), m.cols()}, m.scores)}});
  const json meta = run_meta(o.seed, models_text(o.models) + o.split);
  write_json(o.out + ".ids.json", {{"rows", m.row_ids}, {"cols", m.col_ids}, {"run", meta}});
  out << json{{"command", "simmatrix"},
              {"out", o.out},
              {"rows", m.rows()},
              {"cols", m.cols()},
              {"medr", median_rank(m)},
              {"run", meta}}
             .dump()
      << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Concept detection and semantic attention for video and language tasks", "ctsan"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "key = value file (gen: synthetic spec, train: training keys)");
  auto* seed = app.add_option("--seed", o.seed, "random seed");
  app.add_option("--threads", o.threads, "worker threads for evaluation")->check(CLI::PositiveNumber);
  auto* precision =
      app.add_option("--precision", o.precision, "arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--out", o.out, "output file or directory");

  auto* gen = app.add_subcommand("gen", "write a synthetic planted-concept dataset");
  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset");
  train_cmd->add_option("--task", o.task, "concept, desc, fib, mc or ret")
      ->required()
      ->check(CLI::IsMember({"concept", "desc", "fib", "mc", "ret"}));
  train_cmd->add_option("--data", o.data, "dataset directory")->required();
  train_cmd->add_option("--transfer", o.transfer, "checkpoint whose detector initialises this model");

  auto* detect = app.add_subcommand("detect", "concept words of clips, as JSON lines");
  detect->add_option("--model", o.models, "model directory")->required();
  detect->add_option("--clip", o.clip, "one CTFV feature file");
  detect->add_option("--data", o.data, "dataset directory");
  detect->add_option("--split", o.split, "dataset split")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "compute a metric");
  eval->add_option("--metric", o.metric, "acc, recall, medr or bleu")
      ->required()
      ->check(CLI::IsMember({"acc", "recall", "medr", "bleu"}));
  eval->add_option("--k", o.k, "recall cutoff")->capture_default_str();
  eval->add_option("--n", o.n, "BLEU order")->capture_default_str()->check(CLI::PositiveNumber);
  eval->add_option("--matrix", o.matrix, "similarity checkpoint from simmatrix");
  eval->add_option("--pred", o.pred, "predictions, one per line");
  eval->add_option("--gold", o.gold, "gold answers, one per line; tabs separate BLEU references");
  eval->add_option("--model", o.models, "model directory");
  eval->add_option("--data", o.data, "dataset directory");
  eval->add_option("--split", o.split, "dataset split")->capture_default_str();

  auto* ensemble = app.add_subcommand("ensemble", "evaluate the average of several models");
  ensemble->add_option("--model", o.models, "model directory, repeated per member")->required();
  ensemble->add_option("--data", o.data, "dataset directory")->required();
  ensemble->add_option("--split", o.split, "dataset split")->capture_default_str();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of a task loss on a tiny model");
  gradcheck->add_option("--model", o.task, "concept, desc, fib, mc or ret")
      ->required()
      ->check(CLI::IsMember({"concept", "desc", "fib", "mc", "ret"}));

  auto* simmatrix = app.add_subcommand("simmatrix", "caption-by-clip retrieval scores of a split");
  simmatrix->add_option("--model", o.models, "model directory, repeated per member")->required();
  simmatrix->add_option("--data", o.data, "dataset directory")->required();
  simmatrix->add_option("--split", o.split, "dataset split")->capture_default_str();

  for (auto* sub : {gen, train_cmd, detect, eval, ensemble, gradcheck, simmatrix}) sub->fallthrough();

  if (argc <= 1) {
    err << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto chosen = app.get_subcommands();
    err << (chosen.empty() ? app.help() : chosen.front()->help());
    return kExitUsage;
  }
  o.seed_given = seed->count() > 0;
  o.precision_given = precision->count() > 0;

  try {
    PrecisionScope scope(parse_precision(o.precision));
    if (app.got_subcommand(gen)) return cmd_gen(o, out);
    if (app.got_subcommand(train_cmd)) return cmd_train(o, out, err);
    if (app.got_subcommand(detect)) return cmd_detect(o, out);
    if (app.got_subcommand(eval)) return cmd_eval(o, out);
    if (app.got_subcommand(ensemble)) return cmd_ensemble(o, out);
    if (app.got_subcommand(gradcheck)) return cmd_gradcheck(o, out);
    if (app.got_subcommand(simmatrix)) return cmd_simmatrix(o, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace ctsan
