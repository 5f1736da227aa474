#include "mmpq/harness.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "mmpq/io.hpp"

namespace mmpq {

using nlohmann::json;

std::string_view to_string(Method m) {
  switch (m) {
    case Method::Original: return "original";
    case Method::Int8: return "int8";
    case Method::PQS: return "pq-s";
    case Method::PQM: return "pq-m";
    case Method::PQMOpt: return "pq-mopt";
    case Method::YONO: return "yono";
  }
  return "?";
}

Method method_from_string(std::string_view name) {
  for (Method m : kAllMethods) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown method '" + std::string(name) +
                              "' (expected original, int8, pq-s, pq-m, pq-mopt or yono)");
}

OptimizeConfig optimizer_config_for(Method m, const OptimizeConfig& base) {
  OptimizeConfig c = base;
  switch (m) {
    case Method::PQM:
      c.max_outer_iters = 0;
      break;
    case Method::PQMOpt:
      c.heuristic = Heuristic::None;
      break;
    case Method::YONO:
      c.heuristic = Heuristic::Ours;
      break;
    default:
      throw std::invalid_argument(std::string(to_string(m)) + " is not an optimizer method");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void ExperimentConfig::check() const {
  if (tasks.empty()) throw std::invalid_argument("config: no tasks");
  std::set<std::string> names;
  for (const auto& t : tasks) {
    if (t.name.empty() || !names.insert(t.name).second) throw std::invalid_argument("config: task names must be unique");
    if (t.architecture.empty()) throw std::invalid_argument("config: task '" + t.name + "' has no architecture");
  }
  if (!holdout.empty() && !names.count(holdout)) throw std::invalid_argument("config: unknown holdout task '" + holdout + "'");
  if (!holdout.empty() && tasks.size() < 2) throw std::invalid_argument("config: holdout leaves no training task");
  if (k == 0 || !std::has_single_bit(k) || k > 32768) throw std::invalid_argument("config: k must be a power of two <= 32768");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("config: epsilon must lie in (0, 1)");
  if (seeds.empty()) throw std::invalid_argument("config: no seeds");
  if (arena_bytes == 0) throw std::invalid_argument("config: arena_bytes must be positive");
}

const TaskConfig& ExperimentConfig::task(const std::string& name) const {
  for (const auto& t : tasks) {
    if (t.name == name) return t;
  }
  throw std::invalid_argument("config has no task '" + name + "'");
}

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  static const std::set<std::string> known = {
      "tasks",       "holdout",          "k",          "epsilon",      "seeds",          "data_seed",
      "arena_bytes", "batch_size",       "learning_rate", "finetune_epochs", "finetune_patience",
      "test_fraction", "holdout_fraction", "calibration_samples", "swap_trials", "methods"};
  for (const auto& [key, v] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  ExperimentConfig c;
  for (const auto& t : j.at("tasks")) {
    TaskConfig tc;
    tc.name = t.at("name").get<std::string>();
    tc.generator = t.at("generator").get<std::string>();
    maybe(t, "samples", tc.samples);
    tc.architecture = t.at("architecture").get<std::vector<std::string>>();
    maybe(t, "epochs", tc.epochs);
    maybe(t, "idx_images", tc.idx_images);
    maybe(t, "idx_labels", tc.idx_labels);
    maybe(t, "idx_classes", tc.idx_classes);
    c.tasks.push_back(std::move(tc));
  }
  maybe(j, "holdout", c.holdout);
  maybe(j, "k", c.k);
  maybe(j, "epsilon", c.epsilon);
  maybe(j, "seeds", c.seeds);
  maybe(j, "data_seed", c.data_seed);
  maybe(j, "arena_bytes", c.arena_bytes);
  maybe(j, "batch_size", c.batch_size);
  maybe(j, "learning_rate", c.learning_rate);
  maybe(j, "finetune_epochs", c.finetune_epochs);
  maybe(j, "finetune_patience", c.finetune_patience);
  maybe(j, "test_fraction", c.test_fraction);
  maybe(j, "holdout_fraction", c.holdout_fraction);
  maybe(j, "calibration_samples", c.calibration_samples);
  maybe(j, "swap_trials", c.swap_trials);
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& m : j["methods"]) c.methods.push_back(method_from_string(m.get<std::string>()));
  }
  c.check();
  return c;
}

json to_json(const ExperimentConfig& c) {
  json tasks = json::array();
  for (const auto& t : c.tasks) {
    json tj{{"name", t.name}, {"generator", t.generator}, {"samples", t.samples},
            {"architecture", t.architecture}, {"epochs", t.epochs}};
    if (t.generator == "idx") {
      tj["idx_images"] = t.idx_images;
      tj["idx_labels"] = t.idx_labels;
      tj["idx_classes"] = t.idx_classes;
    }
    tasks.push_back(tj);
  }
  json methods = json::array();
  for (Method m : c.methods) methods.push_back(to_string(m));
  return {{"tasks", tasks},
          {"holdout", c.holdout},
          {"k", c.k},
          {"epsilon", c.epsilon},
          {"seeds", c.seeds},
          {"data_seed", c.data_seed},
          {"arena_bytes", c.arena_bytes},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"finetune_epochs", c.finetune_epochs},
          {"finetune_patience", c.finetune_patience},
          {"test_fraction", c.test_fraction},
          {"holdout_fraction", c.holdout_fraction},
          {"calibration_samples", c.calibration_samples},
          {"swap_trials", c.swap_trials},
          {"methods", methods}};
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  try {
    return config_from_json(read_json_file(path));
  } catch (const json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::size_t task_position(const ExperimentConfig& cfg, const std::string& name) {
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    if (cfg.tasks[i].name == name) return i;
  }
  throw std::invalid_argument("unknown task '" + name + "'");
}

template <typename F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw std::runtime_error("[" + name + "] " + e.what());
  }
}

}  // namespace

DatasetSplits load_task_data(const TaskConfig& task, const ExperimentConfig& cfg) {
  const std::uint64_t seed = mix(cfg.data_seed, task_position(cfg, task.name));
  LabeledDataset all = task.generator == "idx" ? ingest_idx(task.idx_images, task.idx_labels, task.idx_classes)
                                               : make_dataset(task.generator, task.samples, seed);
  return split_dataset(all, cfg.test_fraction, cfg.holdout_fraction, mix(seed, 1));
}

ModelGraph train_original(const TaskConfig& task, const DatasetSplits& data, const ExperimentConfig& cfg,
                          std::uint64_t seed) {
  ModelBuilder b(task.name, data.train.sample_shape());
  for (const auto& tok : task.architecture) b.add(tok);
  const std::uint64_t s = mix(seed, 17 + task_position(cfg, task.name));
  ModelGraph model = b.build(s);
  validate(model);
  if (num_classes(model.layers) != data.train.num_classes) {
    throw std::invalid_argument("task '" + task.name + "': model has " + std::to_string(num_classes(model.layers)) +
                                " outputs, dataset has " + std::to_string(data.train.num_classes) + " classes");
  }
  TrainConfig tc;
  tc.learning_rate = cfg.learning_rate;
  tc.batch_size = cfg.batch_size;
  tc.epochs = task.epochs;
  tc.seed = s;
  tc.bn_mode = BatchNormMode::BatchStatistics;
  train(model, data.train, tc);
  return model;
}

CodebookPair learn_single_model_codebooks(const ModelGraph& model, std::size_t k, std::uint64_t seed) {
  const GroupConfig gc;
  const PoolPair pools = pool_weights(std::span(&model, 1), gc);
  Codebook cb[2];
  for (GroupId g : {GroupId::G3x3, GroupId::G1x1FC}) {
    const WeightPool& pool = pools[g];
    std::size_t rows = 0;
    for (std::size_t r = 0; r < pool.rows(); ++r) rows += !pool.row_is_padding(r);
    cb[static_cast<int>(g)].group = g;
    if (rows == 0) continue;
    const std::size_t kk = std::min(k, std::bit_floor(rows));
    cb[static_cast<int>(g)] = learn_codebook(pool, kk, gc.m, seed);
  }
  return CodebookPair(std::move(cb[0]), std::move(cb[1]), true);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

double Trials::mean() const {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double Trials::stddev() const {
  if (values.size() < 2) return 0.0;
  const double m = mean();
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

double CompressionRow::mean_ratio() const {
  if (bundle_bytes.empty()) return 0.0;
  double r = 0.0;
  for (std::size_t i = 0; i < bundle_bytes.size(); ++i) {
    r += static_cast<double>(original_bytes[i]) / static_cast<double>(bundle_bytes[i]);
  }
  return r / static_cast<double>(bundle_bytes.size());
}

const TaskResult& ExperimentReport::task(const std::string& name) const {
  for (const auto& t : tasks) {
    if (t.task == name) return t;
  }
  throw std::invalid_argument("report has no task '" + name + "'");
}

namespace {

json trials_json(const Trials& t) { return {{"values", t.values}, {"mean", t.mean()}, {"std", t.stddev()}}; }

}  // namespace

json to_json(const ExperimentReport& r) {
  json tasks = json::array();
  for (const auto& t : r.tasks) {
    json methods = json::object();
    for (const auto& [m, res] : t.methods) {
      methods[std::string(to_string(m))] = {{"test_accuracy", trials_json(res.test_accuracy)},
                                            {"holdout_accuracy", trials_json(res.holdout_accuracy)},
                                            {"drop", trials_json(res.drop)},
                                            {"escape_layers", trials_json(res.escape_layers)}};
    }
    tasks.push_back({{"task", t.task},
                     {"held_out", t.held_out},
                     {"parameters", t.parameters},
                     {"methods", methods},
                     {"deployed_accuracy", trials_json(t.deployed_accuracy)},
                     {"runtime_agreement", trials_json(t.runtime_agreement)}});
  }
  json compression = json::array();
  for (const auto& c : r.compression) {
    compression.push_back({{"method", to_string(c.method)},
                           {"original_bytes", c.original_bytes},
                           {"bundle_bytes", c.bundle_bytes},
                           {"ratio", c.mean_ratio()}});
  }
  json bytes_read = json::object();
  for (const auto& [name, v] : r.runtime.bytes_read) bytes_read[name] = {{"compressed", v.first}, {"uncompressed", v.second}};
  json traces = json::array();
  for (const auto& tr : r.traces) {
    json iters = json::array();
    for (const auto& it : tr.report.iterations) {
      json scores = json::object();
      for (const auto& [idx, s] : it.scores) scores[std::to_string(idx)] = s;
      iters.push_back({{"iteration", it.iteration},
                       {"reassigned_codes", it.reassigned_codes},
                       {"finetuned_layers", it.finetuned_layers},
                       {"acc_orig", it.acc_orig},
                       {"acc_recon", it.acc_recon},
                       {"scores", scores},
                       {"selected_layer", it.selected_layer ? json(*it.selected_layer) : json(nullptr)}});
    }
    traces.push_back({{"task", tr.task},
                      {"method", to_string(tr.method)},
                      {"seed", tr.seed},
                      {"status", tr.report.status == OptimizeStatus::Converged ? "converged" : "exhausted"},
                      {"em_iterations", tr.report.em_iterations()},
                      {"returned_iteration", tr.report.returned_iteration},
                      {"iterations", iters}});
  }
  return {{"k", r.k},
          {"epsilon", r.epsilon},
          {"seeds", r.seeds},
          {"holdout", r.holdout},
          {"tasks", tasks},
          {"compression", compression},
          {"runtime",
           {{"capacity", r.runtime.capacity},
            {"high_water_mark", r.runtime.high_water_mark},
            {"swaps", r.runtime.swaps},
            {"weights_match_offline", r.runtime.weights_match_offline},
            {"failed_load_left_valid_state", r.runtime.failed_load_left_valid_state},
            {"bytes_read", bytes_read}}},
          {"codebooks_unchanged", r.codebooks_unchanged},
          {"suite_growth_bytes", r.suite_growth_bytes},
          {"holdout_original_bytes", r.holdout_original_bytes},
          {"traces", traces}};
}

namespace {

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

}  // namespace

std::string render_table(const ExperimentReport& r) {
  std::ostringstream os;
  std::vector<Method> methods;
  for (Method m : kAllMethods) {
    for (const auto& t : r.tasks) {
      if (t.methods.count(m)) {
        methods.push_back(m);
        break;
      }
    }
  }
  os << "Accuracy (%) on the test split, mean +- std over " << r.seeds.size() << " seeds\n";
  os << pad("task", 12);
  for (Method m : methods) os << pad(std::string(to_string(m)), 18);
  os << '\n';
  auto rows = [&](auto pick) {
    for (const auto& t : r.tasks) {
      os << pad(t.task + (t.held_out ? "*" : ""), 12);
      for (Method m : methods) {
        auto it = t.methods.find(m);
        os << pad(it == t.methods.end() ? "-" : pick(it->second), 18);
      }
      os << '\n';
    }
  };
  rows([](const MethodResult& m) { return pct(m.test_accuracy.mean()) + " +- " + pct(m.test_accuracy.stddev()); });
  os << "\nAccuracy (%) on the clean holdout split\n" << pad("task", 12);
  for (Method m : methods) os << pad(std::string(to_string(m)), 18);
  os << '\n';
  rows([](const MethodResult& m) { return pct(m.holdout_accuracy.mean()) + " +- " + pct(m.holdout_accuracy.stddev()); });
  os << "\nAccuracy drop (% points) vs original, test split\n" << pad("task", 12);
  for (Method m : methods) os << pad(std::string(to_string(m)), 18);
  os << '\n';
  rows([](const MethodResult& m) { return pct(m.drop.mean()) + " +- " + pct(m.drop.stddev()); });
  if (!r.holdout.empty()) os << "(* held out of codebook learning)\n";

  os << "\nCompression of the training-task suite\n" << pad("method", 12) << pad("size (bytes)", 16) << "ratio\n";
  for (const auto& c : r.compression) {
    std::ostringstream ratio;
    ratio << std::fixed << std::setprecision(2) << c.mean_ratio() << "x";
    const std::size_t size = c.bundle_bytes.empty() ? 0 : c.bundle_bytes.front();
    os << pad(std::string(to_string(c.method)), 12) << pad(std::to_string(size), 16) << ratio.str() << '\n';
  }
  if (!r.tasks.empty()) {
    os << "\nRuntime: arena " << r.runtime.capacity << " bytes, high-water mark " << r.runtime.high_water_mark
       << " bytes over " << r.runtime.swaps << " swaps\n";
    for (const auto& [name, v] : r.runtime.bytes_read) {
      os << "  " << pad(name, 12) << "bytes read " << v.first << " (uncompressed " << v.second << ")\n";
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

namespace {

double accuracy_of(const std::vector<int>& predicted, const LabeledDataset& data) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) ok += predicted[i] == data.labels[i];
  return data.size() == 0 ? 0.0 : static_cast<double>(ok) / static_cast<double>(data.size());
}

void record(MethodResult& r, double test, double holdout, double orig_test, double escapes) {
  r.test_accuracy.values.push_back(test);
  r.holdout_accuracy.values.push_back(holdout);
  r.drop.values.push_back(orig_test - test);
  r.escape_layers.values.push_back(escapes);
}

bool has(const ExperimentConfig& cfg, Method m) {
  return std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end();
}

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& cfg, const ProgressFn& progress) {
  cfg.check();
  auto note = [&](const std::string& s) {
    if (progress) progress(s);
  };
  PipelineResult out;
  ExperimentReport& rep = out.report;
  rep.k = cfg.k;
  rep.epsilon = cfg.epsilon;
  rep.seeds = cfg.seeds;
  rep.holdout = cfg.holdout;
  rep.runtime.capacity = cfg.arena_bytes;

  // Training tasks first, then the held-out task.
  std::vector<const TaskConfig*> order;
  for (const auto& t : cfg.tasks) {
    if (t.name != cfg.holdout) order.push_back(&t);
  }
  const std::size_t n_train = order.size();
  if (!cfg.holdout.empty()) order.push_back(&cfg.task(cfg.holdout));

  std::vector<DatasetSplits> data;
  for (const TaskConfig* t : order) {
    data.push_back(stage("data " + t->name, [&] { return load_task_data(*t, cfg); }));
    TaskResult tr;
    tr.task = t->name;
    tr.held_out = t->name == cfg.holdout;
    rep.tasks.push_back(std::move(tr));
  }
  std::map<Method, CompressionRow> compression;
  const std::vector<Method> shared_methods = [&] {
    std::vector<Method> v;
    for (Method m : {Method::PQM, Method::PQMOpt, Method::YONO}) {
      if (has(cfg, m)) v.push_back(m);
    }
    return v;
  }();

  for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
    const std::uint64_t seed = cfg.seeds[si];
    const std::string tag = " seed " + std::to_string(seed);
    std::vector<ModelGraph> originals;
    for (std::size_t ti = 0; ti < order.size(); ++ti) {
      note("train " + order[ti]->name + tag);
      originals.push_back(stage("train " + order[ti]->name + tag,
                                [&] { return train_original(*order[ti], data[ti], cfg, seed); }));
      rep.tasks[ti].parameters = parameter_count(originals.back());
    }
    note("codebooks" + tag);
    const CodebookPair pair = stage("codebooks" + tag, [&] {
      const PoolPair pools = pool_weights(std::span(originals.data(), n_train), GroupConfig{});
      return learn_codebooks(pools, cfg.k, mix(seed, 0xc0de));
    });
    const std::uint64_t hash_before = pair.hash();
    const F16CodebookPair f16 = stage("f16 codebooks" + tag, [&] { return to_f16(pair); });

    std::map<Method, std::vector<CompressedModel>> compressed;
    std::vector<EncodedModel> int8_models;
    std::size_t pqs_bytes = 0;
    std::size_t original_bytes = 0;
    for (std::size_t ti = 0; ti < order.size(); ++ti) {
      const TaskConfig& task = *order[ti];
      const DatasetSplits& d = data[ti];
      const ModelGraph& orig = originals[ti];
      TaskResult& tr = rep.tasks[ti];
      const bool training_task = ti < n_train;
      if (training_task) original_bytes += f32_parameter_bytes(orig);
      const std::string st = task.name + tag;
      const double orig_test = evaluate(orig, d.test);
      const double orig_hold = evaluate(orig, d.holdout);
      if (has(cfg, Method::Original)) record(tr.methods[Method::Original], orig_test, orig_hold, orig_test, 0);

      OptimizeConfig base;
      base.epsilon = cfg.epsilon;
      base.finetune_epochs = cfg.finetune_epochs;
      base.finetune_patience = cfg.finetune_patience;
      base.batch_size = cfg.batch_size;
      base.learning_rate = cfg.learning_rate;
      base.seed = mix(seed, 1000 + ti);

      if (has(cfg, Method::Int8) || ti == 0) {
        int8_models.push_back(stage("int8 " + st, [&] { return encode_int8(orig, d.train, cfg.calibration_samples); }));
      }
      if (has(cfg, Method::PQS)) {
        note("pq-s " + st);
        stage("pq-s " + st, [&] {
          const CodebookPair own = learn_single_model_codebooks(orig, cfg.k, mix(seed, 2000 + ti));
          CompressedModel cm = initial_finetune(orig, own, d.train, base);
          record(tr.methods[Method::PQS], evaluate(cm.model, d.test), evaluate(cm.model, d.holdout), orig_test,
                 static_cast<double>(cm.escape_layers.size()));
          if (training_task) {
            const F16CodebookPair own16 = to_f16(own);
            DeploymentBundle b{own16, {encode_for_deployment(cm, own16, d.train, cfg.calibration_samples)}};
            pqs_bytes += serialize(b).size();
          }
          compressed[Method::PQS].push_back(std::move(cm));
        });
      }
      if (!shared_methods.empty()) {
        note("initial finetune " + st);
        const CompressedModel init =
            stage("initial finetune " + st, [&] { return initial_finetune(orig, pair, d.train, base); });
        for (Method m : shared_methods) {
          note(std::string(to_string(m)) + " " + st);
          OptimizeResult res = stage(std::string(to_string(m)) + " " + st, [&] {
            return em_optimize(orig, init, pair, d.train, d.test, optimizer_config_for(m, base));
          });
          record(tr.methods[m], evaluate(res.compressed.model, d.test), evaluate(res.compressed.model, d.holdout),
                 orig_test, static_cast<double>(res.compressed.escape_layers.size()));
          res.report.model = task.name;
          rep.traces.push_back({task.name, m, seed, res.report});
          compressed[m].push_back(std::move(res.compressed));
        }
      }
    }
    rep.codebooks_unchanged = rep.codebooks_unchanged && pair.hash() == hash_before;

    // Bundles.
    auto shared_bundle = [&](Method m, std::size_t count) {
      DeploymentBundle b;
      b.codebooks = f16;
      for (std::size_t ti = 0; ti < count; ++ti) {
        b.models.push_back(encode_for_deployment(compressed[m][ti], f16, data[ti].train, cfg.calibration_samples));
      }
      return serialize(b);
    };
    auto row = [&](Method m, std::size_t bytes) {
      auto& c = compression.try_emplace(m, CompressionRow{m, {}, {}}).first->second;
      c.original_bytes.push_back(original_bytes);
      c.bundle_bytes.push_back(bytes);
    };
    if (has(cfg, Method::Original)) row(Method::Original, original_bytes);
    std::vector<std::byte> int8_bundle;
    if (has(cfg, Method::Int8)) {
      stage("int8 bundle" + tag, [&] {
        DeploymentBundle suite{F16CodebookPair{}, {int8_models.begin(), int8_models.begin() + n_train}};
        row(Method::Int8, serialize(suite).size());
        int8_bundle = serialize(DeploymentBundle{F16CodebookPair{}, int8_models});
        Arena arena(cfg.arena_bytes);
        for (std::size_t ti = 0; ti < order.size(); ++ti) {
          const ResidentModel rm = load_model(int8_bundle, order[ti]->name, arena);
          const double test = accuracy_of(infer_labels(rm, data[ti].test.inputs), data[ti].test);
          const double hold = accuracy_of(infer_labels(rm, data[ti].holdout.inputs), data[ti].holdout);
          record(rep.tasks[ti].methods[Method::Int8], test, hold,
                 rep.tasks[ti].methods.count(Method::Original)
                     ? rep.tasks[ti].methods[Method::Original].test_accuracy.values.back()
                     : evaluate(originals[ti], data[ti].test),
                 static_cast<double>(weight_layer_indices(originals[ti].layers).size()));
        }
      });
    }
    if (has(cfg, Method::PQS)) row(Method::PQS, pqs_bytes);
    std::vector<std::byte> suite_bundle, full_bundle;
    for (Method m : shared_methods) {
      stage(std::string(to_string(m)) + " bundle" + tag, [&] {
        auto bytes = shared_bundle(m, n_train);
        row(m, bytes.size());
        if (m == Method::YONO) suite_bundle = std::move(bytes);
      });
    }

    // Runtime exercise on the YONO bundle of every task.
    if (has(cfg, Method::YONO)) {
      note("runtime" + tag);
      stage("runtime" + tag, [&] {
        full_bundle = order.size() > n_train ? shared_bundle(Method::YONO, order.size()) : suite_bundle;
        if (si == 0) {
          rep.suite_growth_bytes = full_bundle.size() - suite_bundle.size();
          rep.holdout_original_bytes = order.size() > n_train ? f32_parameter_bytes(originals.back()) : 0;
        }
        const DeploymentBundle parsed = deserialize(full_bundle);
        Arena arena(cfg.arena_bytes);
        for (std::size_t ti = 0; ti < order.size(); ++ti) {
          LoadStats stats;
          const ResidentModel rm = swap_model(full_bundle, order[ti]->name, arena, &stats);
          const EncodedModel& enc = parsed.model(order[ti]->name);
          for (const auto& layer : enc.layers) {
            if (!is_weight_layer(layer.spec.kind)) continue;
            const auto expect = offline_int8_weights(layer, parsed.codebooks);
            const auto got = rm.weights(layer.spec.layer_index);
            rep.runtime.weights_match_offline =
                rep.runtime.weights_match_offline && std::equal(expect.begin(), expect.end(), got.begin(), got.end());
          }
          if (si == 0) rep.runtime.bytes_read[order[ti]->name] = {stats.bytes_read, stats.uncompressed_bytes_read};
          const auto labels = infer_labels(rm, data[ti].test.inputs);
          rep.tasks[ti].deployed_accuracy.values.push_back(accuracy_of(labels, data[ti].test));
          const auto reference = predict(compressed[Method::YONO][ti].model, data[ti].test.inputs);
          std::size_t agree = 0;
          for (std::size_t i = 0; i < labels.size(); ++i) agree += labels[i] == reference[i];
          rep.tasks[ti].runtime_agreement.values.push_back(static_cast<double>(agree) /
                                                           static_cast<double>(labels.size()));
        }
        // Random swap / infer sequence.
        std::mt19937_64 rng(mix(seed, 77));
        for (std::size_t i = 0; i < cfg.swap_trials; ++i) {
          const std::size_t ti = rng() % order.size();
          const ResidentModel rm = swap_model(full_bundle, order[ti]->name, arena);
          infer(rm, data[ti].test.subset(rng() % (data[ti].test.size() - 4), 4).inputs);
          ++rep.runtime.swaps;
        }
        rep.runtime.high_water_mark = std::max(rep.runtime.high_water_mark, arena.high_water_mark());
        // Failed loads: unknown model and a too-small arena.
        const std::optional<std::string> before = arena.resident_model();
        try {
          load_model(full_bundle, "no-such-model", arena);
          rep.runtime.failed_load_left_valid_state = false;
        } catch (const std::exception&) {
          rep.runtime.failed_load_left_valid_state =
              rep.runtime.failed_load_left_valid_state && (arena.empty() || arena.resident_model() == before);
        }
        Arena tiny(1);
        try {
          load_model(full_bundle, order.front()->name, tiny);
          rep.runtime.failed_load_left_valid_state = false;
        } catch (const ArenaCapacityError&) {
          rep.runtime.failed_load_left_valid_state =
              rep.runtime.failed_load_left_valid_state && tiny.empty() && tiny.used() == 0;
        }
      });
    }

    if (si == 0) {
      out.artifacts.originals = originals;
      for (std::size_t ti = 0; ti < order.size(); ++ti) out.artifacts.data[order[ti]->name] = data[ti];
      out.artifacts.codebooks = pair;
      out.artifacts.f16_codebooks = f16;
      out.artifacts.compressed = std::move(compressed);
      out.artifacts.suite_bundle = std::move(suite_bundle);
      out.artifacts.full_bundle = std::move(full_bundle);
      out.artifacts.int8_bundle = std::move(int8_bundle);
    }
  }
  for (Method m : kAllMethods) {
    if (compression.count(m)) rep.compression.push_back(compression.at(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checks
// ---------------------------------------------------------------------------

namespace {

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

double mean_drop(const TaskResult& t, Method m) {
  auto it = t.methods.find(m);
  return it == t.methods.end() ? std::nan("") : it->second.drop.mean();
}

}  // namespace

std::vector<Check> pipeline_checks(const ExperimentReport& r) {
  std::vector<Check> out;
  const double slack = 0.005;

  {
    Check c{"accuracy retention on the training tasks", true, ""};
    std::ostringstream d;
    for (const auto& t : r.tasks) {
      if (t.held_out) continue;
      const double y = mean_drop(t, Method::YONO), o = mean_drop(t, Method::PQMOpt), m = mean_drop(t, Method::PQM);
      const bool ok = y <= r.epsilon && y <= o + slack && o <= m + slack;
      c.pass = c.pass && ok;
      d << t.task << ": yono " << fmt(y) << " pq-mopt " << fmt(o) << " pq-m " << fmt(m) << (ok ? "" : " FAIL") << "; ";
    }
    if (r.seeds.size() != 5) {
      c.pass = false;
      d << "expected 5 seeds, got " << r.seeds.size();
    }
    c.detail = d.str();
    out.push_back(std::move(c));
  }
  {
    Check c{"held-out task with frozen codebooks", r.codebooks_unchanged, ""};
    std::ostringstream d;
    bool found = false;
    for (const auto& t : r.tasks) {
      if (!t.held_out) continue;
      found = true;
      const double y = mean_drop(t, Method::YONO);
      c.pass = c.pass && y <= r.epsilon;
      d << t.task << ": yono drop " << fmt(y) << "; ";
    }
    c.pass = c.pass && found && r.seeds.size() == 5;
    d << "codebook hash " << (r.codebooks_unchanged ? "unchanged" : "CHANGED");
    c.detail = d.str();
    out.push_back(std::move(c));
  }
  {
    Check c{"compression ratio and sub-linear growth", false, ""};
    std::ostringstream d;
    double max_escapes = 0.0;
    for (const auto& t : r.tasks) {
      if (t.held_out) continue;
      auto it = t.methods.find(Method::YONO);
      if (it != t.methods.end()) {
        for (double v : it->second.escape_layers.values) max_escapes = std::max(max_escapes, v);
      }
    }
    double ratio = 0.0;
    for (const auto& row : r.compression) {
      if (row.method == Method::YONO) ratio = row.mean_ratio();
    }
    const bool growth = r.holdout_original_bytes == 0 ||
                        static_cast<double>(r.suite_growth_bytes) < 0.2 * static_cast<double>(r.holdout_original_bytes);
    c.pass = ratio >= 8.0 && max_escapes <= 3.0 && growth;
    d << "ratio " << fmt(ratio, 2) << "x, max escape layers " << max_escapes << ", growth " << r.suite_growth_bytes
      << " B vs 0.2 x " << r.holdout_original_bytes << " B";
    c.detail = d.str();
    out.push_back(std::move(c));
  }
  {
    Check c{"runtime equivalence and safety", false, ""};
    bool reads = !r.runtime.bytes_read.empty();
    std::ostringstream d;
    for (const auto& [name, v] : r.runtime.bytes_read) {
      reads = reads && v.first < v.second;
      d << name << " " << v.first << "/" << v.second << " B; ";
    }
    c.pass = r.runtime.weights_match_offline && r.runtime.failed_load_left_valid_state && reads &&
             r.runtime.swaps > 0 && r.runtime.high_water_mark <= r.runtime.capacity;
    d << "weights " << (r.runtime.weights_match_offline ? "match" : "DIFFER") << ", high-water "
      << r.runtime.high_water_mark << "/" << r.runtime.capacity << " over " << r.runtime.swaps << " swaps, failed loads "
      << (r.runtime.failed_load_left_valid_state ? "clean" : "CORRUPT");
    c.detail = d.str();
    out.push_back(std::move(c));
  }
  {
    Check c{"method flag fidelity in traces", true, ""};
    std::size_t pqm = 0, pqmopt = 0;
    for (const auto& tr : r.traces) {
      if (tr.method == Method::PQM) {
        ++pqm;
        c.pass = c.pass && tr.report.em_iterations() == 0;
      } else if (tr.method == Method::PQMOpt) {
        ++pqmopt;
        const auto& first = tr.report.iterations.front().finetuned_layers;
        c.pass = c.pass && first.size() == 2;
        for (const auto& it : tr.report.iterations) c.pass = c.pass && it.finetuned_layers == first;
      }
    }
    c.pass = c.pass && pqm > 0 && pqmopt > 0;
    c.detail = std::to_string(pqm) + " pq-m traces, " + std::to_string(pqmopt) + " pq-mopt traces";
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace mmpq
