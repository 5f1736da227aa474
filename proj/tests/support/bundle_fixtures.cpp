#include "bundle_fixtures.hpp"

namespace mmpq::testing {

namespace {

F16SubCodebook sub(std::size_t k, std::size_t dsub, float start, float step) {
  F16SubCodebook s{k, dsub, {}};
  for (std::size_t i = 0; i < k * dsub; ++i) s.codewords.push_back(float_to_half(start + step * static_cast<float>(i)));
  return s;
}

std::size_t shape_bytes(const Shape& s) { return 1 + 2 * s.size(); }

constexpr std::size_t kQuantParamBytes = 5;  // f32 scale + i8 zero point

}  // namespace

DeploymentBundle golden_bundle() {
  DeploymentBundle b;
  b.codebooks.g3x3 = {GroupId::G3x3, {sub(4, 9, -0.5f, 0.03125f), sub(4, 9, 0.25f, -0.015625f)}};
  b.codebooks.g1x1fc = {GroupId::G1x1FC, {sub(4, 4, -1.0f, 0.125f), sub(4, 4, 0.5f, -0.0625f)}};

  EncodedModel m;
  m.name = "tiny";
  m.input_shape = {1, 4, 4};
  m.input_qp = {0.0078125f, 0};
  m.original_f32_bytes = 4 * (18 + 2 + 4 * 2 + 2 * 3 + 3);

  EncodedLayer conv;
  conv.spec = {LayerKind::Conv3x3, 1, 1, 2, 1, 1, 2};
  conv.output_qp = {0.03125f, -20};
  conv.storage = WeightStorage::Codes;
  conv.weight_shape = {2, 1, 3, 3};
  conv.weight_qp = {0.00390625f, 3};
  conv.codes = CodeMatrix{GroupId::G3x3, 1, 2, {2, 1}};
  conv.bias = std::vector<float>{0.125f, -0.25f};
  m.layers.push_back(conv);

  EncodedLayer bn;
  bn.spec = {LayerKind::BatchNorm, 2, 2, 2, 1, 0, 2};
  bn.output_qp = {0.0625f, -4};
  bn.gamma = {1.0f, 0.75f};
  bn.beta = {0.0f, 0.5f};
  bn.mean = {0.25f, -0.125f};
  bn.var = {1.5f, 0.5f};
  m.layers.push_back(bn);

  EncodedLayer relu;
  relu.spec = {LayerKind::ReLU, 3, 0, 0, 1, 0, 2};
  relu.output_qp = bn.output_qp;
  m.layers.push_back(relu);

  EncodedLayer pool;
  pool.spec = {LayerKind::AvgPool, 4, 0, 0, 1, 0, 0};
  pool.output_qp = bn.output_qp;
  m.layers.push_back(pool);

  EncodedLayer flat;
  flat.spec = {LayerKind::Flatten, 5, 0, 0, 1, 0, 2};
  flat.output_qp = bn.output_qp;
  m.layers.push_back(flat);

  EncodedLayer fc;
  fc.spec = {LayerKind::FullyConnected, 6, 2, 3, 1, 0, 2};
  fc.output_qp = {0.125f, 7};
  fc.storage = WeightStorage::Int8;
  fc.weight_shape = {3, 2};
  fc.weight_qp = {0.015625f, -1};
  fc.int8_weights = {-128, -1, 0, 1, 64, 127};
  fc.bias = std::vector<float>{0.5f, 0.0f, -0.5f};
  m.layers.push_back(fc);

  EncodedLayer soft;
  soft.spec = {LayerKind::SoftmaxClassifier, 7, 0, 0, 1, 0, 2};
  soft.output_qp = fc.output_qp;
  m.layers.push_back(soft);

  b.models.push_back(m);
  return b;
}

std::size_t code_bytes_oracle(const DeploymentBundle& bundle) {
  std::size_t n = 0;
  for (const auto& m : bundle.models) {
    for (const auto& l : m.layers) {
      if (!is_weight_layer(l.spec.kind) || l.storage != WeightStorage::Codes) continue;
      const std::size_t k = bundle.codebooks.group(l.codes->group).k();
      n += l.codes->codes.size() * (k <= 256 ? 1 : 2);
    }
  }
  return n;
}

std::size_t counting_oracle(const DeploymentBundle& bundle) {
  std::size_t n = 20 + 12 * bundle.models.size();
  for (const F16Codebook* cb : {&bundle.codebooks.g3x3, &bundle.codebooks.g1x1fc}) {
    n += 1 + 1 + 1 + 2;
    n += cb->m() * cb->k() * cb->dsub() * 2;
  }
  for (const auto& m : bundle.models) {
    n += 1 + m.name.size() + shape_bytes(m.input_shape) + kQuantParamBytes + 2;
    for (const auto& l : m.layers) {
      n += 1 + 2 + 2 + 2 + 1 + 1 + 1 + kQuantParamBytes;
      if (is_weight_layer(l.spec.kind)) {
        n += 1 + shape_bytes(l.weight_shape) + kQuantParamBytes + 1;
        if (l.storage == WeightStorage::Codes) n += 1 + 4 + 1;
        else n += shape_numel(l.weight_shape);
        if (l.bias) n += 4 * l.spec.out;
      } else if (l.spec.kind == LayerKind::BatchNorm) {
        n += 4 + 4 * 4 * l.spec.in;
      }
    }
  }
  return n + code_bytes_oracle(bundle);
}

}  // namespace mmpq::testing
