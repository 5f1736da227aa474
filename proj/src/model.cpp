#include "mmpq/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace mmpq {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv3x3: return "conv3x3";
    case LayerKind::Conv1x1: return "conv1x1";
    case LayerKind::FullyConnected: return "fc";
    case LayerKind::BatchNorm: return "bn";
    case LayerKind::ReLU: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::SoftmaxClassifier: return "softmax";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (int k = 0; k <= static_cast<int>(LayerKind::SoftmaxClassifier); ++k) {
    auto kind = static_cast<LayerKind>(k);
    if (to_string(kind) == name) return kind;
  }
  throw std::invalid_argument("unknown layer kind '" + std::string(name) + "'");
}

namespace {

[[noreturn]] void layer_error(int layer_index, const std::string& what) {
  throw std::invalid_argument("layer " + std::to_string(layer_index) + ": " + what);
}

Shape layer_output_shape(const Shape& in, const LayerSpec& spec) {
  const int idx = spec.layer_index;
  auto require_rank = [&](std::size_t rank) {
    if (in.size() != rank) {
      layer_error(idx, std::string(to_string(spec.kind)) + " expects rank-" +
                           std::to_string(rank) + " input, got " + shape_to_string(in));
    }
  };
  switch (spec.kind) {
    case LayerKind::Conv3x3:
    case LayerKind::Conv1x1: {
      require_rank(3);
      if (in[0] != spec.in) {
        layer_error(idx, "expects " + std::to_string(spec.in) + " input channels, got " +
                             std::to_string(in[0]));
      }
      const std::size_t k = spec.kind == LayerKind::Conv3x3 ? 3 : 1;
      const auto s = static_cast<std::size_t>(spec.stride);
      const auto p = static_cast<std::size_t>(spec.padding);
      if (s == 0) layer_error(idx, "stride must be positive");
      if (in[1] + 2 * p < k || in[2] + 2 * p < k) layer_error(idx, "input smaller than kernel");
      return {spec.out, (in[1] + 2 * p - k) / s + 1, (in[2] + 2 * p - k) / s + 1};
    }
    case LayerKind::FullyConnected:
      require_rank(1);
      if (in[0] != spec.in) {
        layer_error(idx, "expects " + std::to_string(spec.in) + " input features, got " +
                             std::to_string(in[0]));
      }
      return {spec.out};
    case LayerKind::BatchNorm:
      if (in.size() != 1 && in.size() != 3) layer_error(idx, "bn expects rank 1 or 3 input");
      if (in[0] != spec.in) layer_error(idx, "bn channel count mismatch");
      return in;
    case LayerKind::ReLU:
      return in;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool: {
      require_rank(3);
      if (spec.pool == 0) return {in[0], 1, 1};
      const auto w = static_cast<std::size_t>(spec.pool);
      if (in[1] < w || in[2] < w) layer_error(idx, "pool window larger than input");
      return {in[0], in[1] / w, in[2] / w};
    }
    case LayerKind::Flatten:
      return {shape_numel(in)};
    case LayerKind::SoftmaxClassifier:
      require_rank(1);
      return in;
  }
  layer_error(idx, "unsupported layer kind");
}

Shape expected_weight_shape(const LayerSpec& spec) {
  switch (spec.kind) {
    case LayerKind::Conv3x3: return {spec.out, spec.in, 3, 3};
    case LayerKind::Conv1x1: return {spec.out, spec.in, 1, 1};
    case LayerKind::FullyConnected: return {spec.out, spec.in};
    case LayerKind::BatchNorm: return {spec.in};
    default: return {};
  }
}

}  // namespace

std::vector<Shape> infer_shapes(const Shape& input_shape, const std::vector<LayerSpec>& layers) {
  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  Shape current = input_shape;
  for (const auto& spec : layers) {
    current = layer_output_shape(current, spec);
    shapes.push_back(current);
  }
  return shapes;
}

std::vector<int> weight_layer_indices(const std::vector<LayerSpec>& layers) {
  std::vector<int> out;
  for (const auto& l : layers) {
    if (is_weight_layer(l.kind)) out.push_back(l.layer_index);
  }
  return out;
}

int first_weight_layer(const std::vector<LayerSpec>& layers) {
  auto idx = weight_layer_indices(layers);
  if (idx.empty()) throw std::invalid_argument("model has no weight layers");
  return idx.front();
}

int last_weight_layer(const std::vector<LayerSpec>& layers) {
  auto idx = weight_layer_indices(layers);
  if (idx.empty()) throw std::invalid_argument("model has no weight layers");
  return idx.back();
}

std::size_t num_classes(const std::vector<LayerSpec>& layers) {
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    if (is_weight_layer(it->kind)) return it->out;
  }
  throw std::invalid_argument("model has no weight layers");
}

template <typename T>
const LayerSpec& BasicModelGraph<T>::layer(int layer_index) const {
  if (layer_index < 1 || static_cast<std::size_t>(layer_index) > layers.size()) {
    throw std::out_of_range("no layer with index " + std::to_string(layer_index));
  }
  return layers[static_cast<std::size_t>(layer_index - 1)];
}

template <typename T>
LayerParams<T>& BasicModelGraph<T>::params_of(int layer_index) {
  auto it = params.find(layer_index);
  if (it == params.end()) {
    throw std::out_of_range("layer " + std::to_string(layer_index) + " has no parameters");
  }
  return it->second;
}

template <typename T>
const LayerParams<T>& BasicModelGraph<T>::params_of(int layer_index) const {
  auto it = params.find(layer_index);
  if (it == params.end()) {
    throw std::out_of_range("layer " + std::to_string(layer_index) + " has no parameters");
  }
  return it->second;
}

template <typename T>
void validate(const BasicModelGraph<T>& model) {
  if (model.layers.empty()) throw std::invalid_argument("model '" + model.name + "' has no layers");
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& spec = model.layers[i];
    if (spec.layer_index != static_cast<int>(i + 1)) {
      layer_error(spec.layer_index, "layer indices must run 1..L in list order");
    }
    const bool has = model.params.count(spec.layer_index) != 0;
    if (is_parameterized(spec.kind) != has) {
      layer_error(spec.layer_index, has ? "unexpected parameters" : "missing parameters");
    }
    if (!has) continue;
    const auto& p = model.params.at(spec.layer_index);
    if (p.weight.shape() != expected_weight_shape(spec)) {
      layer_error(spec.layer_index, "weight shape " + shape_to_string(p.weight.shape()) +
                                        " != expected " +
                                        shape_to_string(expected_weight_shape(spec)));
    }
    const std::size_t channels = spec.kind == LayerKind::BatchNorm ? spec.in : spec.out;
    if (p.bias && p.bias->shape() != Shape{channels}) layer_error(spec.layer_index, "bias shape");
    if (spec.kind == LayerKind::BatchNorm) {
      if (!p.bias || !p.running_mean || !p.running_var) {
        layer_error(spec.layer_index, "batch norm requires beta, running mean and variance");
      }
      if (p.running_mean->shape() != Shape{channels} || p.running_var->shape() != Shape{channels}) {
        layer_error(spec.layer_index, "batch norm statistics shape");
      }
    }
  }
  if (model.layers.back().kind != LayerKind::SoftmaxClassifier) {
    throw std::invalid_argument("model '" + model.name + "' must end with a softmax classifier");
  }
  for (int f : model.frozen) {
    if (!model.params.count(f)) layer_error(f, "frozen layer has no parameters");
  }
  (void)first_weight_layer(model.layers);
  (void)infer_shapes(model.input_shape, model.layers);
}

template struct BasicModelGraph<float>;
template struct BasicModelGraph<double>;
template void validate(const BasicModelGraph<float>&);
template void validate(const BasicModelGraph<double>&);

std::size_t f32_parameter_bytes(const ModelGraph& model) {
  return parameter_count(model) * sizeof(float);
}

ModelBuilder::ModelBuilder(std::string name, Shape input_shape)
    : name_(std::move(name)), input_shape_(std::move(input_shape)) {}

Shape ModelBuilder::current_shape() const {
  if (layers_.empty()) return input_shape_;
  return infer_shapes(input_shape_, layers_).back();
}

void ModelBuilder::push(LayerSpec spec, bool bias) {
  spec.layer_index = static_cast<int>(layers_.size() + 1);
  layers_.push_back(spec);
  has_bias_.push_back(bias);
  try {
    (void)infer_shapes(input_shape_, layers_);
  } catch (...) {
    layers_.pop_back();
    has_bias_.pop_back();
    throw;
  }
}

ModelBuilder& ModelBuilder::conv3x3(std::size_t out_channels, int stride, bool bias) {
  push({LayerKind::Conv3x3, 0, current_shape().at(0), out_channels, stride, 1, 0}, bias);
  return *this;
}

ModelBuilder& ModelBuilder::conv1x1(std::size_t out_channels, bool bias) {
  push({LayerKind::Conv1x1, 0, current_shape().at(0), out_channels, 1, 0, 0}, bias);
  return *this;
}

ModelBuilder& ModelBuilder::fully_connected(std::size_t out_features, bool bias) {
  push({LayerKind::FullyConnected, 0, current_shape().at(0), out_features, 1, 0, 0}, bias);
  return *this;
}

ModelBuilder& ModelBuilder::batch_norm() {
  const std::size_t c = current_shape().at(0);
  push({LayerKind::BatchNorm, 0, c, c, 1, 0, 0}, true);
  return *this;
}

ModelBuilder& ModelBuilder::relu() {
  push({LayerKind::ReLU, 0, 0, 0, 1, 0, 0}, false);
  return *this;
}

ModelBuilder& ModelBuilder::max_pool(int window) {
  push({LayerKind::MaxPool, 0, 0, 0, 1, 0, window}, false);
  return *this;
}

ModelBuilder& ModelBuilder::avg_pool(int window) {
  push({LayerKind::AvgPool, 0, 0, 0, 1, 0, window}, false);
  return *this;
}

ModelBuilder& ModelBuilder::flatten() {
  push({LayerKind::Flatten, 0, 0, 0, 1, 0, 0}, false);
  return *this;
}

ModelBuilder& ModelBuilder::softmax() {
  push({LayerKind::SoftmaxClassifier, 0, 0, 0, 1, 0, 0}, false);
  return *this;
}

namespace {

int parse_int(std::string_view text, std::string_view token) {
  int value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size() || value < 0) {
    throw std::invalid_argument("bad number in layer token '" + std::string(token) + "'");
  }
  return value;
}

}  // namespace

ModelBuilder& ModelBuilder::add(std::string_view token) {
  const auto colon = token.find(':');
  const std::string_view kind = token.substr(0, colon);
  std::string_view arg = colon == std::string_view::npos ? std::string_view{} : token.substr(colon + 1);
  int stride = 1;
  if (auto slash = arg.find('/'); slash != std::string_view::npos) {
    stride = parse_int(arg.substr(slash + 1), token);
    arg = arg.substr(0, slash);
  }
  auto need_arg = [&] {
    if (arg.empty()) throw std::invalid_argument("layer token '" + std::string(token) + "' needs a size");
    return static_cast<std::size_t>(parse_int(arg, token));
  };
  if (kind == "conv3x3") return conv3x3(need_arg(), stride);
  if (kind == "conv1x1") return conv1x1(need_arg());
  if (kind == "fc") return fully_connected(need_arg());
  if (kind == "bn") return batch_norm();
  if (kind == "relu") return relu();
  if (kind == "maxpool") return max_pool(arg.empty() ? 2 : parse_int(arg, token));
  if (kind == "avgpool") return avg_pool(arg.empty() ? 0 : parse_int(arg, token));
  if (kind == "flatten") return flatten();
  if (kind == "softmax") return softmax();
  throw std::invalid_argument("unknown layer token '" + std::string(token) + "'");
}

ModelGraph ModelBuilder::build(std::uint64_t seed) const {
  ModelGraph model;
  model.name = name_;
  model.input_shape = input_shape_;
  model.layers = layers_;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& spec = layers_[i];
    if (!is_parameterized(spec.kind)) continue;
    LayerParams<float> p;
    if (spec.kind == LayerKind::BatchNorm) {
      p.weight = Tensor({spec.in}, 1.0f);
      p.bias = Tensor({spec.in}, 0.0f);
      p.running_mean = Tensor({spec.in}, 0.0f);
      p.running_var = Tensor({spec.in}, 1.0f);
    } else {
      const Shape shape = expected_weight_shape(spec);
      const std::size_t fan_in = shape_numel(shape) / spec.out;
      std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
      p.weight = Tensor(shape);
      for (float& w : p.weight.values()) w = dist(rng);
      if (has_bias_[i]) p.bias = Tensor({spec.out}, 0.0f);
    }
    model.params.emplace(spec.layer_index, std::move(p));
  }
  validate(model);
  return model;
}

}  // namespace mmpq
