// Command-line driver: train, compress, bundle, run, swap-bench, report.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include <CLI11.hpp>

#include "mmpq/harness.hpp"
#include "mmpq/io.hpp"

namespace fs = std::filesystem;
using namespace mmpq;

namespace {

struct Options {
  std::string config = "configs/desk.json";
  std::string out = "runs/latest";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k;
  std::optional<double> epsilon;
  std::optional<std::size_t> arena_bytes;
  std::vector<std::string> methods;
  std::optional<std::string> holdout;
  bool quiet = false;
};

ExperimentConfig effective_config(const Options& o) {
  ExperimentConfig cfg = load_config(o.config);
  if (o.seed) cfg.seeds = {*o.seed};
  if (o.k) cfg.k = *o.k;
  if (o.epsilon) cfg.epsilon = *o.epsilon;
  if (o.arena_bytes) cfg.arena_bytes = *o.arena_bytes;
  if (o.holdout) cfg.holdout = *o.holdout;
  if (!o.methods.empty()) {
    cfg.methods.clear();
    for (const auto& m : o.methods) cfg.methods.push_back(method_from_string(m));
  }
  cfg.check();
  return cfg;
}

void log(const Options& o, const std::string& msg) {
  if (!o.quiet) std::cerr << "[mmpq] " << msg << '\n';
}

std::vector<std::string> training_tasks(const ExperimentConfig& cfg) {
  std::vector<std::string> v;
  for (const auto& t : cfg.tasks) {
    if (t.name != cfg.holdout) v.push_back(t.name);
  }
  return v;
}

ModelGraph load_original(const fs::path& dir, const std::string& task) {
  const fs::path p = dir / "models" / (task + ".json");
  if (!fs::exists(p)) throw std::runtime_error(p.string() + " missing; run `mmpq train` first");
  return model_from_json(read_json_file(p));
}

int cmd_train(const Options& o) {
  const ExperimentConfig cfg = effective_config(o);
  fs::create_directories(fs::path(o.out) / "models");
  write_json_file(fs::path(o.out) / "config.json", to_json(cfg));
  for (const auto& task : cfg.tasks) {
    log(o, "train " + task.name);
    const DatasetSplits d = load_task_data(task, cfg);
    const ModelGraph m = train_original(task, d, cfg, cfg.seeds.front());
    write_json_file(fs::path(o.out) / "models" / (task.name + ".json"), to_json(m));
    std::cout << task.name << ": " << parameter_count(m) << " parameters, test accuracy " << evaluate(m, d.test)
              << '\n';
  }
  return 0;
}

int cmd_compress(const Options& o) {
  const ExperimentConfig cfg = effective_config(o);
  const fs::path dir(o.out);
  const auto names = training_tasks(cfg);
  std::vector<ModelGraph> train_models;
  for (const auto& n : names) train_models.push_back(load_original(dir, n));
  log(o, "learn codebooks");
  const CodebookPair pair = learn_codebooks(pool_weights(train_models, GroupConfig{}), cfg.k, cfg.seeds.front());
  write_json_file(dir / "codebooks.json", to_json(pair));
  const std::vector<Method> methods =
      o.methods.empty() ? std::vector<Method>{Method::YONO} : cfg.methods;
  for (Method m : methods) {
    if (m != Method::PQM && m != Method::PQMOpt && m != Method::YONO) {
      throw std::invalid_argument("compress supports pq-m, pq-mopt and yono; '" + std::string(to_string(m)) +
                                  "' is produced by `report`");
    }
    const fs::path mdir = dir / "compressed" / std::string(to_string(m));
    fs::create_directories(mdir);
    for (const auto& task : cfg.tasks) {
      log(o, std::string(to_string(m)) + " " + task.name);
      const DatasetSplits d = load_task_data(task, cfg);
      const ModelGraph orig = load_original(dir, task.name);
      OptimizeConfig base;
      base.epsilon = cfg.epsilon;
      base.finetune_epochs = cfg.finetune_epochs;
      base.finetune_patience = cfg.finetune_patience;
      base.batch_size = cfg.batch_size;
      base.learning_rate = cfg.learning_rate;
      base.seed = cfg.seeds.front();
      const OptimizeResult res = optimize(orig, pair, d.train, d.test, optimizer_config_for(m, base));
      write_json_file(mdir / (task.name + ".json"), to_json(res.compressed));
      std::ofstream(mdir / (task.name + ".trace.jsonl")) << res.report.to_json_lines();
      std::cout << to_string(m) << " " << task.name << ": original " << evaluate(orig, d.test) << ", compressed "
                << evaluate(res.compressed.model, d.test) << ", escape layers " << res.compressed.escape_layers.size()
                << '\n';
    }
  }
  return 0;
}

int cmd_bundle(const Options& o) {
  const ExperimentConfig cfg = effective_config(o);
  const fs::path dir(o.out);
  const Method m = o.methods.empty() ? Method::YONO : cfg.methods.front();
  const CodebookPair pair = codebooks_from_json(read_json_file(dir / "codebooks.json"));
  const F16CodebookPair f16 = to_f16(pair);
  DeploymentBundle bundle{f16, {}};
  std::vector<ModelGraph> originals;
  for (const auto& task : cfg.tasks) {
    const fs::path p = dir / "compressed" / std::string(to_string(m)) / (task.name + ".json");
    const CompressedModel cm = compressed_from_json(read_json_file(p));
    const DatasetSplits d = load_task_data(task, cfg);
    bundle.models.push_back(encode_for_deployment(cm, f16, d.train, cfg.calibration_samples));
    originals.push_back(load_original(dir, task.name));
  }
  ByteAccounting acc;
  const auto bytes = serialize(bundle, &acc);
  write_binary_file(dir / "bundle.ynb", bytes);
  const CompressionReport cr = compression_ratio(originals, bytes);
  nlohmann::json j{{"bundle_bytes", bytes.size()}, {"original_bytes", cr.total_original_bytes}, {"ratio", cr.ratio}};
  for (std::size_t c = 0; c < acc.totals.size(); ++c) {
    j["categories"][std::string(to_string(static_cast<ByteCategory>(c)))] = acc.totals[c];
  }
  write_json_file(dir / "bundle.json", j);
  std::cout << "bundle " << bytes.size() << " bytes, ratio " << cr.ratio << "x\n";
  return 0;
}

int cmd_run(const Options& o) {
  const ExperimentConfig cfg = effective_config(o);
  const fs::path dir(o.out);
  const auto bytes = read_binary_file(dir / "bundle.ynb");
  Arena arena(cfg.arena_bytes);
  for (const auto& task : cfg.tasks) {
    const DatasetSplits d = load_task_data(task, cfg);
    LoadStats stats;
    const ResidentModel rm = swap_model(bytes, task.name, arena, &stats);
    const auto labels = infer_labels(rm, d.test.inputs);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += labels[i] == d.test.labels[i];
    std::cout << task.name << ": int8 accuracy " << static_cast<double>(ok) / static_cast<double>(labels.size())
              << ", bytes read " << stats.bytes_read << " (f32 " << stats.uncompressed_bytes_read << "), arena "
              << stats.arena_bytes << " B\n";
  }
  return 0;
}

int cmd_swap_bench(const Options& o, std::size_t trials) {
  const ExperimentConfig cfg = effective_config(o);
  const auto bytes = read_binary_file(fs::path(o.out) / "bundle.ynb");
  const BundleIndex index = index_bundle(bytes);
  Arena arena(cfg.arena_bytes);
  std::mt19937_64 rng(cfg.seeds.front());
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t read = 0;
  for (std::size_t i = 0; i < trials; ++i) {
    const auto& e = index.entries[rng() % index.entries.size()];
    LoadStats stats;
    const ResidentModel rm = swap_model(bytes, e.name, arena, &stats);
    Shape shape{1};
    for (auto dim : rm.input_shape()) shape.push_back(dim);
    Tensor x(shape);
    infer(rm, x);
    read += stats.bytes_read;
  }
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  std::cout << trials << " swaps, high-water mark " << arena.high_water_mark() << " / " << arena.capacity()
            << " B, bytes read " << read << ", " << ms / static_cast<double>(trials) << " ms per swap+infer\n";
  return arena.high_water_mark() <= arena.capacity() ? 0 : 1;
}

int cmd_report(const Options& o) {
  const ExperimentConfig cfg = effective_config(o);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_json_file(dir / "config.json", to_json(cfg));
  const auto t0 = std::chrono::steady_clock::now();
  const PipelineResult res = run_pipeline(cfg, [&](const std::string& s) { log(o, s); });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json_file(dir / "report.json", to_json(res.report));
  const std::string table = render_table(res.report);
  std::ofstream(dir / "report.txt") << table;
  if (!res.artifacts.full_bundle.empty()) write_binary_file(dir / "bundle.ynb", res.artifacts.full_bundle);
  std::cout << table << "\nAcceptance\n";
  bool all = true;
  for (const Check& c : pipeline_checks(res.report)) {
    all = all && c.pass;
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
  }
  std::cout << "pipeline time " << secs << " s\n";
  return all ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-model product-quantization compression toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  std::size_t trials = 100;
  app.add_option("--config", o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--out", o.out, "Run directory");
  app.add_option("--seed", o.seed, "Run a single seed instead of the configured list");
  app.add_option("--k", o.k, "Codewords per sub-codebook");
  app.add_option("--epsilon", o.epsilon, "Permitted absolute accuracy loss");
  app.add_option("--arena-bytes", o.arena_bytes, "Runtime arena capacity");
  app.add_option("--method", o.methods, "original, int8, pq-s, pq-m, pq-mopt or yono (repeatable)")
      ->check(CLI::IsMember({"original", "int8", "pq-s", "pq-m", "pq-mopt", "yono"}));
  app.add_option("--holdout", o.holdout, "Task excluded from codebook learning");
  app.add_flag("-q,--quiet", o.quiet, "No progress output");

  auto* train = app.add_subcommand("train", "Train the original model of every task");
  auto* compress = app.add_subcommand("compress", "Learn shared codebooks and compress every model");
  auto* bundle = app.add_subcommand("bundle", "Serialize compressed models into a deployment bundle");
  auto* run = app.add_subcommand("run", "Load every bundled model into the arena and evaluate it");
  auto* swap = app.add_subcommand("swap-bench", "Random model swaps through the arena");
  swap->add_option("--trials", trials, "Number of swaps");
  auto* report = app.add_subcommand("report", "Full experiment: every method and seed, report and acceptance");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(o);
    if (*compress) return cmd_compress(o);
    if (*bundle) return cmd_bundle(o);
    if (*run) return cmd_run(o);
    if (*swap) return cmd_swap_bench(o, trials);
    if (*report) return cmd_report(o);
  } catch (const std::exception& e) {
    std::cerr << "mmpq: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
