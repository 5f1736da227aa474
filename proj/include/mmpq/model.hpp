#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "mmpq/tensor.hpp"

namespace mmpq {

enum class LayerKind : std::uint8_t {
  Conv3x3 = 0,
  Conv1x1 = 1,
  FullyConnected = 2,
  BatchNorm = 3,
  ReLU = 4,
  MaxPool = 5,
  AvgPool = 6,
  Flatten = 7,
  SoftmaxClassifier = 8,
};

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

/// Conv3x3, Conv1x1 and FullyConnected: the kinds whose weights are encoded
/// against the shared codebooks.
constexpr bool is_weight_layer(LayerKind kind) {
  return kind == LayerKind::Conv3x3 || kind == LayerKind::Conv1x1 ||
         kind == LayerKind::FullyConnected;
}

constexpr bool is_parameterized(LayerKind kind) {
  return is_weight_layer(kind) || kind == LayerKind::BatchNorm;
}

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  int layer_index = 0;  // 1-based position in the topological order
  std::size_t in = 0;   // channels or features; 0 for shape-preserving kinds
  std::size_t out = 0;
  int stride = 1;
  int padding = 0;
  int pool = 2;  // pooling window (== stride); 0 means global

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// BatchNorm stores gamma in `weight` and beta in `bias`.
template <typename T>
struct LayerParams {
  BasicTensor<T> weight;
  std::optional<BasicTensor<T>> bias;
  std::optional<BasicTensor<T>> running_mean;
  std::optional<BasicTensor<T>> running_var;

  std::size_t parameter_count() const;

  template <typename U>
  LayerParams<U> cast() const {
    LayerParams<U> out;
    out.weight = weight.template cast<U>();
    if (bias) out.bias = bias->template cast<U>();
    if (running_mean) out.running_mean = running_mean->template cast<U>();
    if (running_var) out.running_var = running_var->template cast<U>();
    return out;
  }

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

template <typename T>
std::size_t LayerParams<T>::parameter_count() const {
  std::size_t n = weight.size();
  if (bias) n += bias->size();
  if (running_mean) n += running_mean->size();
  if (running_var) n += running_var->size();
  return n;
}

template <typename T>
struct BasicModelGraph {
  std::string name;
  Shape input_shape;  // per-sample: {C, H, W} or {features}
  std::vector<LayerSpec> layers;
  std::map<int, LayerParams<T>> params;
  std::set<int> frozen;

  const LayerSpec& layer(int layer_index) const;
  LayerParams<T>& params_of(int layer_index);
  const LayerParams<T>& params_of(int layer_index) const;

  template <typename U>
  BasicModelGraph<U> cast() const {
    BasicModelGraph<U> out;
    out.name = name;
    out.input_shape = input_shape;
    out.layers = layers;
    out.frozen = frozen;
    for (const auto& [idx, p] : params) out.params.emplace(idx, p.template cast<U>());
    return out;
  }

  friend bool operator==(const BasicModelGraph&, const BasicModelGraph&) = default;
};

using ModelGraph = BasicModelGraph<float>;
using ModelGraphD = BasicModelGraph<double>;

// Checks layer ordering, parameter presence and shapes, and shape flow from
// input to the classifier. Throws std::invalid_argument naming the offending
// layer_index.
template <typename T>
void validate(const BasicModelGraph<T>& model);

/// Per-sample output shape of every layer, in list order.
std::vector<Shape> infer_shapes(const Shape& input_shape,
                                const std::vector<LayerSpec>& layers);

std::vector<int> weight_layer_indices(const std::vector<LayerSpec>& layers);
int first_weight_layer(const std::vector<LayerSpec>& layers);
int last_weight_layer(const std::vector<LayerSpec>& layers);
std::size_t num_classes(const std::vector<LayerSpec>& layers);

template <typename T>
std::size_t parameter_count(const BasicModelGraph<T>& model) {
  std::size_t n = 0;
  for (const auto& [idx, p] : model.params) n += p.parameter_count();
  return n;
}

/// Bytes the model occupies as plain 32-bit floats (weights, biases, BN).
std::size_t f32_parameter_bytes(const ModelGraph& model);

/// Builds a ModelGraph layer by layer, inferring channel counts from the
/// previous layer. Parameters are He-initialized from `seed` on build().
class ModelBuilder {
 public:
  ModelBuilder(std::string name, Shape input_shape);

  ModelBuilder& conv3x3(std::size_t out_channels, int stride = 1, bool bias = true);
  ModelBuilder& conv1x1(std::size_t out_channels, bool bias = true);
  ModelBuilder& fully_connected(std::size_t out_features, bool bias = true);
  ModelBuilder& batch_norm();
  ModelBuilder& relu();
  ModelBuilder& max_pool(int window = 2);
  ModelBuilder& avg_pool(int window = 0);
  ModelBuilder& flatten();
  ModelBuilder& softmax();

  /// Appends a layer from a compact token such as "conv3x3:16", "conv3x3:32/2",
  /// "fc:10", "bn", "relu", "maxpool:2", "avgpool" (global), "flatten",
  /// "softmax".
  ModelBuilder& add(std::string_view token);

  ModelGraph build(std::uint64_t seed) const;

 private:
  void push(LayerSpec spec, bool bias);
  Shape current_shape() const;

  std::string name_;
  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<bool> has_bias_;
};

}  // namespace mmpq
