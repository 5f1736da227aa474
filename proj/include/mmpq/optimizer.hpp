#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mmpq/network.hpp"
#include "mmpq/pq.hpp"

namespace mmpq {

enum class Heuristic { Ours, None };

std::string_view to_string(Heuristic h);

struct OptimizeConfig {
  double epsilon = 0.03;                        // permitted absolute accuracy loss
  std::optional<std::size_t> max_outer_iters;  // default: (weight layers) - 2
  std::size_t finetune_epochs = 5;
  std::size_t finetune_patience = 2;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  Heuristic heuristic = Heuristic::Ours;
  std::uint64_t seed = 0;

  void check() const;
};

/// Layers whose weights are finetuned (and later stored uncompressed). Starts
/// as the first and last weight layer and only grows.
class FinetuneSet {
 public:
  FinetuneSet(int first, int last);

  bool contains(int layer_index) const { return members_.count(layer_index) != 0; }
  void add(int layer_index);
  std::size_t size() const { return order_.size(); }
  const std::vector<int>& layers() const { return order_; }
  const std::set<int>& as_set() const { return members_; }

 private:
  std::vector<int> order_;
  std::set<int> members_;
};

/// A model expressed against the shared codebooks: weights of layers outside
/// `escape_layers` equal their decoded codes.
struct CompressedModel {
  ModelGraph model;
  ModelCodes codes;  // every weight layer; escape-layer codes are stale and never stored
  std::set<int> escape_layers;

  friend bool operator==(const CompressedModel&, const CompressedModel&) = default;
};

struct IterationRecord {
  std::size_t iteration = 0;  // 0 = state after the initial finetune
  std::size_t reassigned_codes = 0;
  std::vector<int> finetuned_layers;
  double acc_orig = 0.0;
  double acc_recon = 0.0;
  std::map<int, double> scores;  // diff/N per candidate layer, when the heuristic ran
  std::optional<int> selected_layer;
};

enum class OptimizeStatus { Converged, Exhausted };

struct OptimizeReport {
  std::string model;
  std::vector<IterationRecord> iterations;
  OptimizeStatus status = OptimizeStatus::Exhausted;
  std::size_t returned_iteration = 0;

  std::size_t em_iterations() const { return iterations.empty() ? 0 : iterations.size() - 1; }
  /// One JSON object per iteration followed by a summary object.
  std::string to_json_lines() const;
};

struct OptimizeResult {
  CompressedModel compressed;
  OptimizeReport report;
};

/// Encodes the pretrained model, reconstructs it from the codebooks, freezes
/// every layer strictly between the first and last weight layer, and
/// finetunes.
CompressedModel initial_finetune(const ModelGraph& model, const CodebookPair& pair, const LabeledDataset& train,
                                 const OptimizeConfig& cfg);

/// Code reassignment / selective finetune loop. Stops as soon as
/// acc_orig - epsilon <= acc_recon on `test`; on exhaustion returns the
/// iteration with the best acc_recon.
OptimizeResult em_optimize(const ModelGraph& original, CompressedModel initial, const CodebookPair& pair,
                           const LabeledDataset& train, const LabeledDataset& test, const OptimizeConfig& cfg);

/// initial_finetune followed by em_optimize.
OptimizeResult optimize(const ModelGraph& original, const CodebookPair& pair, const LabeledDataset& train,
                        const LabeledDataset& test, const OptimizeConfig& cfg);

/// ||W_l - What_l||_F^2 / N_l for every weight layer not in `finetune_set`.
std::map<int, double> layer_difference_scores(const ModelGraph& original, const ModelGraph& recon,
                                              const FinetuneSet& finetune_set);

/// argmax of layer_difference_scores, lowest layer_index on ties. Throws when
/// every weight layer is already in the set.
int select_layer_heuristic(const ModelGraph& original, const ModelGraph& recon, const FinetuneSet& finetune_set);

}  // namespace mmpq
