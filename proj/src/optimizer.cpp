#include "mmpq/optimizer.hpp"

#include <json.hpp>
#include <sstream>
#include <stdexcept>

namespace mmpq {

std::string_view to_string(Heuristic h) { return h == Heuristic::Ours ? "ours" : "none"; }

void OptimizeConfig::check() const {
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw std::invalid_argument("epsilon must lie in (0, 1]");
  if (finetune_epochs == 0 || batch_size == 0) throw std::invalid_argument("finetune epochs and batch size must be positive");
}

FinetuneSet::FinetuneSet(int first, int last) {
  add(first);
  if (last != first) add(last);
}

void FinetuneSet::add(int layer_index) {
  if (!members_.insert(layer_index).second) {
    throw std::invalid_argument("layer " + std::to_string(layer_index) + " is already in the finetune set");
  }
  order_.push_back(layer_index);
}

namespace {

constexpr double kAccuracySlack = 1e-12;

bool within_epsilon(double acc_orig, double acc_recon, double epsilon) {
  return acc_orig - epsilon <= acc_recon + kAccuracySlack;
}

// Freezes every parameterized layer not in `trainable`.
void freeze_all_but(ModelGraph& model, const std::set<int>& trainable) {
  model.frozen.clear();
  for (const auto& [idx, p] : model.params) {
    if (!trainable.count(idx)) model.frozen.insert(idx);
  }
}

TrainConfig finetune_config(const OptimizeConfig& cfg, std::uint64_t salt, bool train_frozen_biases) {
  TrainConfig t;
  t.learning_rate = cfg.learning_rate;
  t.epochs = cfg.finetune_epochs;
  t.batch_size = cfg.batch_size;
  t.patience = cfg.finetune_patience;
  t.seed = cfg.seed * 0x9e3779b97f4a7c15ULL + salt;
  t.bn_mode = BatchNormMode::RunningStatistics;
  t.train_frozen_biases = train_frozen_biases;
  return t;
}

}  // namespace

CompressedModel initial_finetune(const ModelGraph& model, const CodebookPair& pair, const LabeledDataset& train,
                                 const OptimizeConfig& cfg) {
  cfg.check();
  const int first = first_weight_layer(model.layers);
  const int last = last_weight_layer(model.layers);
  CompressedModel out;
  out.codes = encode_model(model, pair);
  out.model = reconstruct_model(out.codes, pair, model);
  out.escape_layers = {first, last};
  freeze_all_but(out.model, out.escape_layers);
  mmpq::train(out.model, train, finetune_config(cfg, 0, false));
  out.model.frozen.clear();
  return out;
}

std::map<int, double> layer_difference_scores(const ModelGraph& original, const ModelGraph& recon,
                                              const FinetuneSet& finetune_set) {
  if (original.layers != recon.layers) throw std::invalid_argument("models are not structurally identical");
  std::map<int, double> scores;
  for (int idx : weight_layer_indices(original.layers)) {
    if (finetune_set.contains(idx)) continue;
    const Tensor& w = original.params_of(idx).weight;
    const Tensor& wh = recon.params_of(idx).weight;
    double sq = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double d = static_cast<double>(w[i]) - static_cast<double>(wh[i]);
      sq += d * d;
    }
    scores[idx] = sq / static_cast<double>(w.size());
  }
  return scores;
}

int select_layer_heuristic(const ModelGraph& original, const ModelGraph& recon, const FinetuneSet& finetune_set) {
  const auto scores = layer_difference_scores(original, recon, finetune_set);
  if (scores.empty()) throw std::invalid_argument("every weight layer is already in the finetune set");
  int best = scores.begin()->first;
  double best_score = scores.begin()->second;
  for (const auto& [idx, s] : scores) {
    if (s > best_score) {
      best = idx;
      best_score = s;
    }
  }
  return best;
}

OptimizeResult em_optimize(const ModelGraph& original, CompressedModel initial, const CodebookPair& pair,
                           const LabeledDataset& train, const LabeledDataset& test, const OptimizeConfig& cfg) {
  cfg.check();
  const auto weight_layers = weight_layer_indices(original.layers);
  const int first = weight_layers.front();
  const int last = weight_layers.back();
  const std::size_t bound = weight_layers.size() > 2 ? weight_layers.size() - 2 : 0;
  const std::size_t max_iters = cfg.max_outer_iters.value_or(bound);

  OptimizeResult result;
  result.report.model = original.name;
  const double acc_orig = evaluate(original, test);

  CompressedModel state = std::move(initial);
  FinetuneSet finetune_set(first, last);
  state.escape_layers = finetune_set.as_set();

  IterationRecord rec0;
  rec0.finetuned_layers = finetune_set.layers();
  rec0.acc_orig = acc_orig;
  rec0.acc_recon = evaluate(state.model, test);
  result.report.iterations.push_back(rec0);

  CompressedModel best = state;
  double best_acc = rec0.acc_recon;
  std::size_t best_iter = 0;
  if (within_epsilon(acc_orig, rec0.acc_recon, cfg.epsilon)) {
    result.report.status = OptimizeStatus::Converged;
    result.compressed = std::move(state);
    return result;
  }

  for (std::size_t i = 1; i <= max_iters; ++i) {
    IterationRecord rec;
    rec.iteration = i;
    // E-step: nearest codes for the current weights of layers outside S.
    for (int idx : weight_layers) {
      if (finetune_set.contains(idx)) continue;
      CodeMatrix fresh = encode_layer(state.model.params_of(idx).weight, state.model.layer(idx).kind, pair);
      const CodeMatrix& old = state.codes.at(idx);
      for (std::size_t c = 0; c < fresh.codes.size(); ++c) rec.reassigned_codes += fresh.codes[c] != old.codes[c];
      state.codes[idx] = std::move(fresh);
    }
    // M-step: decode, freeze layers outside S, finetune S weights and all biases.
    state.escape_layers = finetune_set.as_set();
    state.model = reconstruct_model(state.codes, pair, state.model, state.escape_layers);
    freeze_all_but(state.model, state.escape_layers);
    mmpq::train(state.model, train, finetune_config(cfg, i, true));
    state.model.frozen.clear();

    rec.finetuned_layers = finetune_set.layers();
    rec.acc_orig = acc_orig;
    rec.acc_recon = evaluate(state.model, test);
    if (rec.acc_recon > best_acc) {
      best = state;
      best_acc = rec.acc_recon;
      best_iter = i;
    }
    if (within_epsilon(acc_orig, rec.acc_recon, cfg.epsilon)) {
      result.report.iterations.push_back(std::move(rec));
      result.report.status = OptimizeStatus::Converged;
      result.report.returned_iteration = i;
      result.compressed = std::move(state);
      return result;
    }
    if (cfg.heuristic == Heuristic::Ours && finetune_set.size() < weight_layers.size()) {
      rec.scores = layer_difference_scores(original, state.model, finetune_set);
      const int chosen = select_layer_heuristic(original, state.model, finetune_set);
      rec.selected_layer = chosen;
      finetune_set.add(chosen);
    }
    result.report.iterations.push_back(std::move(rec));
  }
  result.report.status = OptimizeStatus::Exhausted;
  result.report.returned_iteration = best_iter;
  result.compressed = std::move(best);
  return result;
}

OptimizeResult optimize(const ModelGraph& original, const CodebookPair& pair, const LabeledDataset& train,
                        const LabeledDataset& test, const OptimizeConfig& cfg) {
  return em_optimize(original, initial_finetune(original, pair, train, cfg), pair, train, test, cfg);
}

std::string OptimizeReport::to_json_lines() const {
  std::ostringstream os;
  for (const auto& rec : iterations) {
    nlohmann::json j;
    j["model"] = model;
    j["iteration"] = rec.iteration;
    j["reassigned_codes"] = rec.reassigned_codes;
    j["finetuned_layers"] = rec.finetuned_layers;
    j["acc_orig"] = rec.acc_orig;
    j["acc_recon"] = rec.acc_recon;
    nlohmann::json scores = nlohmann::json::object();
    for (const auto& [idx, s] : rec.scores) scores[std::to_string(idx)] = s;
    j["scores"] = scores;
    j["selected_layer"] = rec.selected_layer ? nlohmann::json(*rec.selected_layer) : nlohmann::json(nullptr);
    os << j.dump() << '\n';
  }
  nlohmann::json summary;
  summary["model"] = model;
  summary["status"] = status == OptimizeStatus::Converged ? "converged" : "exhausted";
  summary["em_iterations"] = em_iterations();
  summary["returned_iteration"] = returned_iteration;
  os << summary.dump() << '\n';
  return os.str();
}

}  // namespace mmpq
