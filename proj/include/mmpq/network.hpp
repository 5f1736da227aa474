#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "mmpq/model.hpp"

namespace mmpq {

struct LabeledDataset {
  Tensor inputs;  // (N, ...sample shape)
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }
  std::size_t sample_size() const { return shape_numel(sample_shape()); }

  Tensor gather(std::span<const std::size_t> indices) const;
  LabeledDataset subset(std::size_t begin, std::size_t count) const;

  /// Throws if labels are out of range or the input tensor is inconsistent.
  void check() const;
};

enum class BatchNormMode {
  BatchStatistics,    // normalize with batch statistics, update running stats
  RunningStatistics,  // normalize with stored running stats ("static")
};

template <typename T>
using Gradients = std::map<int, LayerParams<T>>;

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inference forward pass (running BN statistics). Returns (N, classes) logits.
template <typename T>
BasicTensor<T> forward(const BasicModelGraph<T>& model, const BasicTensor<T>& batch);

/// Like forward(), but returns the output of every layer in list order.
template <typename T>
std::vector<BasicTensor<T>> forward_trace(const BasicModelGraph<T>& model,
                                          const BasicTensor<T>& batch);

template <typename T>
struct LossAndGradients {
  double loss = 0.0;  // mean softmax cross-entropy
  std::size_t correct = 0;
  Gradients<T> gradients;
};

/// One forward+backward pass. In BatchStatistics mode the running statistics
/// of non-frozen BN layers are updated when `update_running_stats` is set.
template <typename T>
LossAndGradients<T> loss_and_gradients(BasicModelGraph<T>& model, const BasicTensor<T>& inputs,
                                       std::span<const int> labels, BatchNormMode mode,
                                       bool update_running_stats);

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t patience = 0;  // stop after this many epochs without loss improvement; 0 = off
  BatchNormMode bn_mode = BatchNormMode::BatchStatistics;
  bool train_frozen_biases = false;  // biases/BN affine of frozen layers still train
};

struct TrainReport {
  double final_loss = 0.0;
  double accuracy = 0.0;  // training-set accuracy after the last epoch
  std::size_t epochs_run = 0;
  std::vector<double> epoch_losses;
};

/// Minibatch Adam on softmax cross-entropy. Single-threaded and deterministic
/// for a given seed. Frozen layers are never written.
TrainReport train(ModelGraph& model, const LabeledDataset& data, const TrainConfig& cfg);

double evaluate(const ModelGraph& model, const LabeledDataset& data);
std::vector<int> predict(const ModelGraph& model, const Tensor& inputs);

struct GradientCheckOptions {
  double h = 1e-4;
  std::size_t samples_per_tensor = 12;
  std::uint64_t seed = 0;
  BatchNormMode bn_mode = BatchNormMode::BatchStatistics;
  // Applied to the analytic gradients before comparison (negative controls).
  std::function<void(Gradients<double>&)> corrupt;
};

/// Central-difference check of loss_and_gradients over a sampled subset of
/// every parameter tensor. Returns the max relative error.
double gradient_check(const ModelGraphD& model, const TensorD& inputs,
                      std::span<const int> labels, const GradientCheckOptions& options);

/// Central-difference check of an arbitrary scalar function.
double gradient_check(const std::function<double(std::span<const double>)>& f,
                      std::span<const double> analytic, std::span<const double> theta,
                      double h);

}  // namespace mmpq
