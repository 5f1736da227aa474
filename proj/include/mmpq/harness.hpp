#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmpq/bundle.hpp"
#include "mmpq/datasets.hpp"
#include "mmpq/optimizer.hpp"
#include "mmpq/runtime.hpp"

namespace mmpq {

enum class Method { Original, Int8, PQS, PQM, PQMOpt, YONO };
inline constexpr Method kAllMethods[] = {Method::Original, Method::Int8, Method::PQS,
                                         Method::PQM,      Method::PQMOpt, Method::YONO};

std::string_view to_string(Method m);
Method method_from_string(std::string_view name);

/// Optimizer flags that realize a shared-codebook method.
OptimizeConfig optimizer_config_for(Method m, const OptimizeConfig& base);

struct TaskConfig {
  std::string name;
  std::string generator;  // spirals, digits, textures, rings or idx
  std::size_t samples = 4000;
  std::vector<std::string> architecture;  // ModelBuilder tokens
  std::size_t epochs = 30;
  std::string idx_images, idx_labels;
  std::size_t idx_classes = 10;
};

struct ExperimentConfig {
  std::vector<TaskConfig> tasks;
  std::string holdout;  // excluded from codebook learning, compressed afterwards; empty = none
  std::size_t k = 256;
  double epsilon = 0.03;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::uint64_t data_seed = 2024;
  std::size_t arena_bytes = kDefaultArenaBytes;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::size_t finetune_epochs = 5;
  std::size_t finetune_patience = 2;
  double test_fraction = 0.1;
  double holdout_fraction = 0.1;
  std::size_t calibration_samples = 256;
  std::size_t swap_trials = 100;
  std::vector<Method> methods = {std::begin(kAllMethods), std::end(kAllMethods)};

  void check() const;
  const TaskConfig& task(const std::string& name) const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Training, test and clean-holdout splits of a task (identical across seeds).
DatasetSplits load_task_data(const TaskConfig& task, const ExperimentConfig& cfg);

/// Builds and trains the original model of a task.
ModelGraph train_original(const TaskConfig& task, const DatasetSplits& data, const ExperimentConfig& cfg,
                          std::uint64_t seed);

/// Per-model codebooks (PQ-S): K shrinks to the largest power of two the
/// model's own rows support; a group without rows stays empty.
CodebookPair learn_single_model_codebooks(const ModelGraph& model, std::size_t k, std::uint64_t seed);

// ---------------------------------------------------------------------------

struct Trials {
  std::vector<double> values;
  double mean() const;
  double stddev() const;  // sample standard deviation
};

struct MethodResult {
  Trials test_accuracy;     // split used by the optimizer's stopping rule
  Trials holdout_accuracy;  // clean split, never seen
  Trials drop;              // original test accuracy - method test accuracy
  Trials escape_layers;     // max escape layers per model
};

struct TaskResult {
  std::string task;
  bool held_out = false;
  std::size_t parameters = 0;
  std::map<Method, MethodResult> methods;
  Trials deployed_accuracy;  // YONO model through the int8 runtime, test split
  Trials runtime_agreement;  // int8 runtime vs f32 compressed model, top-1
};

struct CompressionRow {
  Method method;
  std::vector<std::size_t> original_bytes;  // per seed, the training-task suite
  std::vector<std::size_t> bundle_bytes;
  double mean_ratio() const;
};

struct TraceRecord {
  std::string task;
  Method method;
  std::uint64_t seed;
  OptimizeReport report;
};

struct RuntimeResult {
  std::size_t capacity = 0;
  std::size_t high_water_mark = 0;
  std::size_t swaps = 0;
  bool weights_match_offline = true;
  bool failed_load_left_valid_state = true;
  std::map<std::string, std::pair<std::size_t, std::size_t>> bytes_read;  // compressed, uncompressed
};

struct ExperimentReport {
  std::size_t k = 0;
  double epsilon = 0.0;
  std::vector<std::uint64_t> seeds;
  std::string holdout;
  std::vector<TaskResult> tasks;
  std::vector<CompressionRow> compression;
  RuntimeResult runtime;
  bool codebooks_unchanged = true;
  std::size_t suite_growth_bytes = 0;      // bundle growth from adding the held-out model (first seed)
  std::size_t holdout_original_bytes = 0;  // that model's f32 size
  std::vector<TraceRecord> traces;

  const TaskResult& task(const std::string& name) const;
};

nlohmann::json to_json(const ExperimentReport& report);
std::string render_table(const ExperimentReport& report);

/// Everything produced for the first seed, kept for inspection and tests.
struct PipelineArtifacts {
  std::vector<ModelGraph> originals;              // training tasks, then the held-out task
  std::map<std::string, DatasetSplits> data;
  CodebookPair codebooks;
  F16CodebookPair f16_codebooks;
  std::map<Method, std::vector<CompressedModel>> compressed;  // per method, same order as originals
  std::vector<std::byte> suite_bundle;  // YONO, training tasks only
  std::vector<std::byte> full_bundle;   // YONO, training tasks + held-out task
  std::vector<std::byte> int8_bundle;
};

struct PipelineResult {
  ExperimentReport report;
  PipelineArtifacts artifacts;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Trains every original, learns the shared codebooks on the training tasks,
/// runs every method for every seed, emits bundles and exercises the runtime.
/// Failures are rethrown tagged with the pipeline stage.
PipelineResult run_pipeline(const ExperimentConfig& cfg, const ProgressFn& progress = {});

}  // namespace mmpq

namespace mmpq {

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Pipeline-level acceptance checks (accuracy retention, held-out task,
/// compression, runtime safety, method traces).
std::vector<Check> pipeline_checks(const ExperimentReport& report);

}  // namespace mmpq
