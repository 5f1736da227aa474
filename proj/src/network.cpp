#include "mmpq/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

namespace mmpq {

Tensor LabeledDataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t stride = sample_size();
  Shape shape = inputs.shape();
  shape[0] = indices.size();
  std::vector<float> out(indices.size() * stride);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(inputs.data() + indices[i] * stride, stride, out.data() + i * stride);
  }
  return Tensor(std::move(shape), std::move(out));
}

LabeledDataset LabeledDataset::subset(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw std::out_of_range("dataset subset out of range");
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  LabeledDataset out;
  out.inputs = gather(idx);
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
  out.num_classes = num_classes;
  return out;
}

void LabeledDataset::check() const {
  if (labels.empty()) throw std::invalid_argument("dataset is empty");
  if (inputs.rank() < 2 || inputs.dim(0) != labels.size()) {
    throw std::invalid_argument("dataset inputs do not match label count");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " at sample " +
                                  std::to_string(i) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
  }
}

namespace {

template <typename T>
struct LayerCache {
  BasicTensor<T> input;
  std::vector<T> xhat;
  std::vector<T> inv_std;
  std::vector<std::uint32_t> argmax;
};

struct ConvGeometry {
  std::size_t c, h, w, k, stride, pad, ho, wo;
  std::size_t patch() const { return c * k * k; }
  std::size_t positions() const { return ho * wo; }
};

ConvGeometry conv_geometry(const LayerSpec& spec, const Shape& in) {
  ConvGeometry g{};
  g.c = in[1];
  g.h = in[2];
  g.w = in[3];
  g.k = spec.kind == LayerKind::Conv3x3 ? 3 : 1;
  g.stride = static_cast<std::size_t>(spec.stride);
  g.pad = static_cast<std::size_t>(spec.padding);
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  return g;
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * P;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.wo + ox] =
                inside ? x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)]
                       : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * P;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

bool direct_1x1(const ConvGeometry& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

template <typename T>
BasicTensor<T> conv_forward(const LayerSpec& spec, const LayerParams<T>& p, const BasicTensor<T>& x) {
  const ConvGeometry g = conv_geometry(spec, x.shape());
  const std::size_t n = x.dim(0), O = spec.out, J = g.patch(), P = g.positions();
  BasicTensor<T> y({n, O, g.ho, g.wo});
  std::vector<T> cols(direct_1x1(g) ? 0 : J * P);
  const T* w = p.weight.data();
  for (std::size_t s = 0; s < n; ++s) {
    const T* xs = x.data() + s * g.c * g.h * g.w;
    const T* c = xs;
    if (!direct_1x1(g)) {
      im2col(xs, g, cols.data());
      c = cols.data();
    }
    T* ys = y.data() + s * O * P;
    for (std::size_t o = 0; o < O; ++o) {
      T* yrow = ys + o * P;
      const T b = p.bias ? (*p.bias)[o] : T{0};
      std::fill(yrow, yrow + P, b);
      const T* wrow = w + o * J;
      for (std::size_t j = 0; j < J; ++j) {
        const T wj = wrow[j];
        const T* crow = c + j * P;
        for (std::size_t q = 0; q < P; ++q) yrow[q] += wj * crow[q];
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> conv_backward(const LayerSpec& spec, const LayerParams<T>& p, const BasicTensor<T>& x,
                             const BasicTensor<T>& dy, LayerParams<T>& grad, bool need_dx) {
  const ConvGeometry g = conv_geometry(spec, x.shape());
  const std::size_t n = x.dim(0), O = spec.out, J = g.patch(), P = g.positions();
  BasicTensor<T> dx;
  if (need_dx) dx = BasicTensor<T>(x.shape(), T{0});
  std::vector<T> cols(direct_1x1(g) ? 0 : J * P);
  std::vector<T> dcols(need_dx ? J * P : 0);
  const T* w = p.weight.data();
  T* dw = grad.weight.data();
  for (std::size_t s = 0; s < n; ++s) {
    const T* xs = x.data() + s * g.c * g.h * g.w;
    const T* c = xs;
    if (!direct_1x1(g)) {
      im2col(xs, g, cols.data());
      c = cols.data();
    }
    const T* dys = dy.data() + s * O * P;
    for (std::size_t o = 0; o < O; ++o) {
      const T* dyrow = dys + o * P;
      if (grad.bias) {
        T acc{0};
        for (std::size_t q = 0; q < P; ++q) acc += dyrow[q];
        (*grad.bias)[o] += acc;
      }
      T* dwrow = dw + o * J;
      for (std::size_t j = 0; j < J; ++j) {
        const T* crow = c + j * P;
        T acc{0};
        for (std::size_t q = 0; q < P; ++q) acc += dyrow[q] * crow[q];
        dwrow[j] += acc;
      }
    }
    if (!need_dx) continue;
    std::fill(dcols.begin(), dcols.end(), T{0});
    for (std::size_t o = 0; o < O; ++o) {
      const T* dyrow = dys + o * P;
      const T* wrow = w + o * J;
      for (std::size_t j = 0; j < J; ++j) {
        const T wj = wrow[j];
        T* drow = dcols.data() + j * P;
        for (std::size_t q = 0; q < P; ++q) drow[q] += wj * dyrow[q];
      }
    }
    T* dxs = dx.data() + s * g.c * g.h * g.w;
    if (direct_1x1(g)) {
      for (std::size_t i = 0; i < J * P; ++i) dxs[i] += dcols[i];
    } else {
      col2im(dcols.data(), g, dxs);
    }
  }
  return dx;
}

template <typename T>
BasicTensor<T> fc_forward(const LayerSpec& spec, const LayerParams<T>& p, const BasicTensor<T>& x) {
  const std::size_t n = x.dim(0), I = spec.in, O = spec.out;
  BasicTensor<T> y({n, O});
  const T* w = p.weight.data();
  for (std::size_t s = 0; s < n; ++s) {
    const T* xs = x.data() + s * I;
    for (std::size_t o = 0; o < O; ++o) {
      const T* wrow = w + o * I;
      T acc{0};
      for (std::size_t i = 0; i < I; ++i) acc += wrow[i] * xs[i];
      y[s * O + o] = p.bias ? acc + (*p.bias)[o] : acc;
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> fc_backward(const LayerSpec& spec, const LayerParams<T>& p, const BasicTensor<T>& x,
                           const BasicTensor<T>& dy, LayerParams<T>& grad, bool need_dx) {
  const std::size_t n = x.dim(0), I = spec.in, O = spec.out;
  BasicTensor<T> dx;
  if (need_dx) dx = BasicTensor<T>(x.shape(), T{0});
  const T* w = p.weight.data();
  T* dw = grad.weight.data();
  for (std::size_t s = 0; s < n; ++s) {
    const T* xs = x.data() + s * I;
    for (std::size_t o = 0; o < O; ++o) {
      const T g = dy[s * O + o];
      if (grad.bias) (*grad.bias)[o] += g;
      T* dwrow = dw + o * I;
      for (std::size_t i = 0; i < I; ++i) dwrow[i] += g * xs[i];
      if (need_dx) {
        const T* wrow = w + o * I;
        T* dxs = dx.data() + s * I;
        for (std::size_t i = 0; i < I; ++i) dxs[i] += wrow[i] * g;
      }
    }
  }
  return dx;
}

// Channel-major view of a BN input: count of values per channel and the
// stride pattern (n, c, inner).
struct BnGeometry {
  std::size_t n, c, inner;
};

BnGeometry bn_geometry(const Shape& in) {
  BnGeometry g{in[0], in[1], 1};
  for (std::size_t i = 2; i < in.size(); ++i) g.inner *= in[i];
  return g;
}

template <typename T>
BasicTensor<T> bn_forward(const LayerParams<T>& p, const BasicTensor<T>& x, BatchNormMode mode,
                          LayerCache<T>* cache, LayerParams<T>* stats_out) {
  const BnGeometry g = bn_geometry(x.shape());
  BasicTensor<T> y(x.shape());
  std::vector<T> xhat(cache ? x.size() : 0);
  std::vector<T> inv_std(g.c);
  const std::size_t m = g.n * g.inner;
  for (std::size_t c = 0; c < g.c; ++c) {
    T mean, var;
    if (mode == BatchNormMode::BatchStatistics) {
      double sum = 0.0;
      for (std::size_t s = 0; s < g.n; ++s)
        for (std::size_t i = 0; i < g.inner; ++i) sum += x[(s * g.c + c) * g.inner + i];
      const double mu = sum / static_cast<double>(m);
      double sq = 0.0;
      for (std::size_t s = 0; s < g.n; ++s)
        for (std::size_t i = 0; i < g.inner; ++i) {
          const double d = x[(s * g.c + c) * g.inner + i] - mu;
          sq += d * d;
        }
      mean = static_cast<T>(mu);
      var = static_cast<T>(sq / static_cast<double>(m));
      if (stats_out) {
        const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : sq;
        auto& rm = (*stats_out->running_mean)[c];
        auto& rv = (*stats_out->running_var)[c];
        rm = static_cast<T>((1.0 - kBatchNormMomentum) * rm + kBatchNormMomentum * mu);
        rv = static_cast<T>((1.0 - kBatchNormMomentum) * rv + kBatchNormMomentum * unbiased);
      }
    } else {
      mean = (*p.running_mean)[c];
      var = (*p.running_var)[c];
    }
    inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + kBatchNormEpsilon));
    const T gamma = p.weight[c], beta = (*p.bias)[c];
    for (std::size_t s = 0; s < g.n; ++s) {
      for (std::size_t i = 0; i < g.inner; ++i) {
        const std::size_t at = (s * g.c + c) * g.inner + i;
        const T xh = (x[at] - mean) * inv_std[c];
        if (cache) xhat[at] = xh;
        y[at] = gamma * xh + beta;
      }
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
BasicTensor<T> bn_backward(const LayerParams<T>& p, const LayerCache<T>& cache, const BasicTensor<T>& dy,
                           BatchNormMode mode, LayerParams<T>& grad) {
  const BnGeometry g = bn_geometry(dy.shape());
  BasicTensor<T> dx(dy.shape());
  const std::size_t m = g.n * g.inner;
  for (std::size_t c = 0; c < g.c; ++c) {
    T sum_dy{0}, sum_dy_xhat{0};
    for (std::size_t s = 0; s < g.n; ++s)
      for (std::size_t i = 0; i < g.inner; ++i) {
        const std::size_t at = (s * g.c + c) * g.inner + i;
        sum_dy += dy[at];
        sum_dy_xhat += dy[at] * cache.xhat[at];
      }
    grad.weight[c] += sum_dy_xhat;
    (*grad.bias)[c] += sum_dy;
    const T gamma = p.weight[c];
    const T is = cache.inv_std[c];
    for (std::size_t s = 0; s < g.n; ++s)
      for (std::size_t i = 0; i < g.inner; ++i) {
        const std::size_t at = (s * g.c + c) * g.inner + i;
        if (mode == BatchNormMode::BatchStatistics) {
          const T mm = static_cast<T>(m);
          dx[at] = gamma * is / mm * (mm * dy[at] - sum_dy - cache.xhat[at] * sum_dy_xhat);
        } else {
          dx[at] = dy[at] * gamma * is;
        }
      }
  }
  return dx;
}

template <typename T>
BasicTensor<T> pool_forward(const LayerSpec& spec, const BasicTensor<T>& x, LayerCache<T>* cache) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t wy = spec.pool == 0 ? h : static_cast<std::size_t>(spec.pool);
  const std::size_t wx = spec.pool == 0 ? w : static_cast<std::size_t>(spec.pool);
  const std::size_t ho = h / wy, wo = w / wx;
  BasicTensor<T> y({n, c, ho, wo});
  std::vector<std::uint32_t> argmax(spec.kind == LayerKind::MaxPool && cache ? y.size() : 0);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* xp = x.data() + plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t out = (plane * ho + oy) * wo + ox;
        if (spec.kind == LayerKind::MaxPool) {
          std::size_t best = oy * wy * w + ox * wx;
          for (std::size_t dy = 0; dy < wy; ++dy)
            for (std::size_t dx = 0; dx < wx; ++dx) {
              const std::size_t at = (oy * wy + dy) * w + ox * wx + dx;
              if (xp[at] > xp[best]) best = at;
            }
          y[out] = xp[best];
          if (!argmax.empty()) argmax[out] = static_cast<std::uint32_t>(best);
        } else {
          T acc{0};
          for (std::size_t dy = 0; dy < wy; ++dy)
            for (std::size_t dx = 0; dx < wx; ++dx) acc += xp[(oy * wy + dy) * w + ox * wx + dx];
          y[out] = acc / static_cast<T>(wy * wx);
        }
      }
  }
  if (cache) cache->argmax = std::move(argmax);
  return y;
}

template <typename T>
BasicTensor<T> pool_backward(const LayerSpec& spec, const LayerCache<T>& cache, const BasicTensor<T>& dy) {
  const Shape& in = cache.input.shape();
  const std::size_t n = in[0], c = in[1], h = in[2], w = in[3];
  const std::size_t wy = spec.pool == 0 ? h : static_cast<std::size_t>(spec.pool);
  const std::size_t wx = spec.pool == 0 ? w : static_cast<std::size_t>(spec.pool);
  const std::size_t ho = h / wy, wo = w / wx;
  BasicTensor<T> dx(in, T{0});
  const T inv = T{1} / static_cast<T>(wy * wx);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    T* dxp = dx.data() + plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t out = (plane * ho + oy) * wo + ox;
        if (spec.kind == LayerKind::MaxPool) {
          dxp[cache.argmax[out]] += dy[out];
        } else {
          for (std::size_t ddy = 0; ddy < wy; ++ddy)
            for (std::size_t ddx = 0; ddx < wx; ++ddx)
              dxp[(oy * wy + ddy) * w + ox * wx + ddx] += dy[out] * inv;
        }
      }
  }
  return dx;
}

template <typename T>
Shape batch_shape(std::size_t n, const Shape& sample) {
  Shape s{n};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

template <typename T>
void check_input(const BasicModelGraph<T>& model, const BasicTensor<T>& batch) {
  Shape expected = model.input_shape;
  if (batch.rank() != expected.size() + 1 ||
      !std::equal(expected.begin(), expected.end(), batch.shape().begin() + 1)) {
    throw std::invalid_argument("layer " + std::to_string(model.layers.front().layer_index) +
                                ": input batch shape " + shape_to_string(batch.shape()) +
                                " does not match model input " + shape_to_string(expected));
  }
}

template <typename T>
BasicTensor<T> layer_forward(const BasicModelGraph<T>& model, const LayerSpec& spec, BasicTensor<T> x,
                             BatchNormMode mode, LayerCache<T>* cache, LayerParams<T>* stats_out) {
  const bool rank_ok = spec.kind == LayerKind::FullyConnected || spec.kind == LayerKind::SoftmaxClassifier
                           ? x.rank() == 2
                           : (spec.kind == LayerKind::Conv3x3 || spec.kind == LayerKind::Conv1x1 ||
                              spec.kind == LayerKind::MaxPool || spec.kind == LayerKind::AvgPool)
                                 ? x.rank() == 4
                                 : true;
  if (!rank_ok || ((spec.kind == LayerKind::Conv3x3 || spec.kind == LayerKind::Conv1x1 ||
                    spec.kind == LayerKind::FullyConnected || spec.kind == LayerKind::BatchNorm) &&
                   x.dim(1) != spec.in)) {
    throw std::invalid_argument("layer " + std::to_string(spec.layer_index) + " (" +
                                std::string(to_string(spec.kind)) + "): input shape " +
                                shape_to_string(x.shape()) + " is incompatible");
  }
  switch (spec.kind) {
    case LayerKind::Conv3x3:
    case LayerKind::Conv1x1: {
      auto y = conv_forward(spec, model.params_of(spec.layer_index), x);
      if (cache) cache->input = std::move(x);
      return y;
    }
    case LayerKind::FullyConnected: {
      auto y = fc_forward(spec, model.params_of(spec.layer_index), x);
      if (cache) cache->input = std::move(x);
      return y;
    }
    case LayerKind::BatchNorm:
      return bn_forward(model.params_of(spec.layer_index), x, mode, cache, stats_out);
    case LayerKind::ReLU: {
      BasicTensor<T> y = x;
      for (T& v : y.values()) v = v > T{0} ? v : T{0};
      if (cache) cache->input = std::move(x);
      return y;
    }
    case LayerKind::MaxPool:
    case LayerKind::AvgPool: {
      auto y = pool_forward(spec, x, cache);
      if (cache) cache->input = std::move(x);
      return y;
    }
    case LayerKind::Flatten: {
      const std::size_t n = x.dim(0);
      if (cache) cache->input = BasicTensor<T>(x.shape());
      x.reshape({n, x.size() / n});
      return x;
    }
    case LayerKind::SoftmaxClassifier:
      return x;
  }
  throw std::logic_error("unreachable");
}

}  // namespace

template <typename T>
BasicTensor<T> forward(const BasicModelGraph<T>& model, const BasicTensor<T>& batch) {
  check_input(model, batch);
  BasicTensor<T> x = batch;
  for (const auto& spec : model.layers) {
    x = layer_forward(model, spec, std::move(x), BatchNormMode::RunningStatistics,
                      static_cast<LayerCache<T>*>(nullptr), static_cast<LayerParams<T>*>(nullptr));
  }
  return x;
}

template <typename T>
std::vector<BasicTensor<T>> forward_trace(const BasicModelGraph<T>& model, const BasicTensor<T>& batch) {
  check_input(model, batch);
  std::vector<BasicTensor<T>> outs;
  BasicTensor<T> x = batch;
  for (const auto& spec : model.layers) {
    x = layer_forward(model, spec, std::move(x), BatchNormMode::RunningStatistics,
                      static_cast<LayerCache<T>*>(nullptr), static_cast<LayerParams<T>*>(nullptr));
    outs.push_back(x);
  }
  return outs;
}

template <typename T>
LossAndGradients<T> loss_and_gradients(BasicModelGraph<T>& model, const BasicTensor<T>& inputs,
                                       std::span<const int> labels, BatchNormMode mode,
                                       bool update_running_stats) {
  check_input(model, inputs);
  const std::size_t n = inputs.dim(0);
  if (labels.size() != n) throw std::invalid_argument("label count does not match batch");
  std::vector<LayerCache<T>> caches(model.layers.size());
  BasicTensor<T> x = inputs;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& spec = model.layers[i];
    LayerParams<T>* stats = nullptr;
    if (spec.kind == LayerKind::BatchNorm && mode == BatchNormMode::BatchStatistics &&
        update_running_stats && !model.frozen.count(spec.layer_index)) {
      stats = &model.params_of(spec.layer_index);
    }
    x = layer_forward(model, spec, std::move(x), mode, &caches[i], stats);
  }

  LossAndGradients<T> result;
  const std::size_t classes = x.dim(1);
  BasicTensor<T> dy(x.shape());
  double loss = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const T* z = x.data() + s * classes;
    const T zmax = *std::max_element(z, z + classes);
    double denom = 0.0;
    for (std::size_t k = 0; k < classes; ++k) denom += std::exp(static_cast<double>(z[k] - zmax));
    const auto label = static_cast<std::size_t>(labels[s]);
    if (label >= classes) throw std::invalid_argument("label out of range");
    loss += std::log(denom) - static_cast<double>(z[label] - zmax);
    if (static_cast<std::size_t>(std::max_element(z, z + classes) - z) == label) ++result.correct;
    for (std::size_t k = 0; k < classes; ++k) {
      const double prob = std::exp(static_cast<double>(z[k] - zmax)) / denom;
      dy[s * classes + k] = static_cast<T>((prob - (k == label ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  result.loss = loss / static_cast<double>(n);

  for (const auto& [idx, p] : model.params) {
    LayerParams<T> g;
    g.weight = BasicTensor<T>(p.weight.shape(), T{0});
    if (p.bias) g.bias = BasicTensor<T>(p.bias->shape(), T{0});
    result.gradients.emplace(idx, std::move(g));
  }

  for (std::size_t i = model.layers.size(); i-- > 0;) {
    const auto& spec = model.layers[i];
    auto& cache = caches[i];
    const bool need_dx = i > 0;
    switch (spec.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1:
        dy = conv_backward(spec, model.params_of(spec.layer_index), cache.input, dy,
                           result.gradients.at(spec.layer_index), need_dx);
        break;
      case LayerKind::FullyConnected:
        dy = fc_backward(spec, model.params_of(spec.layer_index), cache.input, dy,
                         result.gradients.at(spec.layer_index), need_dx);
        break;
      case LayerKind::BatchNorm:
        dy = bn_backward(model.params_of(spec.layer_index), cache, dy, mode,
                         result.gradients.at(spec.layer_index));
        break;
      case LayerKind::ReLU:
        for (std::size_t k = 0; k < dy.size(); ++k) {
          if (!(cache.input[k] > T{0})) dy[k] = T{0};
        }
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        dy = pool_backward(spec, cache, dy);
        break;
      case LayerKind::Flatten:
        dy.reshape(cache.input.shape());
        break;
      case LayerKind::SoftmaxClassifier:
        break;
    }
    if (!need_dx) break;
  }
  return result;
}

template BasicTensor<float> forward(const BasicModelGraph<float>&, const BasicTensor<float>&);
template BasicTensor<double> forward(const BasicModelGraph<double>&, const BasicTensor<double>&);
template std::vector<BasicTensor<float>> forward_trace(const BasicModelGraph<float>&, const BasicTensor<float>&);
template std::vector<BasicTensor<double>> forward_trace(const BasicModelGraph<double>&, const BasicTensor<double>&);
template LossAndGradients<float> loss_and_gradients(BasicModelGraph<float>&, const BasicTensor<float>&,
                                                    std::span<const int>, BatchNormMode, bool);
template LossAndGradients<double> loss_and_gradients(BasicModelGraph<double>&, const BasicTensor<double>&,
                                                     std::span<const int>, BatchNormMode, bool);

namespace {

struct AdamSlot {
  std::vector<float> m, v;
};

void adam_update(std::span<float> param, std::span<const float> grad, AdamSlot& slot,
                 const TrainConfig& cfg, std::size_t step) {
  if (slot.m.empty()) {
    slot.m.assign(param.size(), 0.0f);
    slot.v.assign(param.size(), 0.0f);
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const auto lr = static_cast<float>(cfg.learning_rate / bc1);
  const auto c2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(cfg.adam_epsilon);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const float g = grad[i];
    slot.m[i] = b1 * slot.m[i] + (1.0f - b1) * g;
    slot.v[i] = b2 * slot.v[i] + (1.0f - b2) * g * g;
    param[i] -= lr * slot.m[i] / (std::sqrt(slot.v[i] * c2) + eps);
  }
}

void check_finite_gradients(const Gradients<float>& grads, std::size_t step) {
  for (const auto& [idx, g] : grads) {
    if (!g.weight.all_finite() || (g.bias && !g.bias->all_finite())) {
      throw TrainingError("non-finite gradient in layer " + std::to_string(idx) + " at step " +
                          std::to_string(step));
    }
  }
}

}  // namespace

TrainReport train(ModelGraph& model, const LabeledDataset& data, const TrainConfig& cfg) {
  data.check();
  if (cfg.batch_size == 0 || cfg.epochs == 0) throw std::invalid_argument("epochs and batch size must be positive");
  if (data.num_classes != num_classes(model.layers)) {
    throw std::invalid_argument("dataset has " + std::to_string(data.num_classes) +
                                " classes, model '" + model.name + "' outputs " +
                                std::to_string(num_classes(model.layers)));
  }
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::map<int, AdamSlot> weight_state, bias_state;
  std::size_t step = 0;
  TrainReport report;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - begin);
      std::span<const std::size_t> idx(order.data() + begin, count);
      Tensor batch = data.gather(idx);
      std::vector<int> labels(count);
      for (std::size_t i = 0; i < count; ++i) labels[i] = data.labels[idx[i]];
      ++step;
      auto lg = loss_and_gradients(model, batch, labels, cfg.bn_mode, true);
      if (!std::isfinite(lg.loss)) {
        throw TrainingError("non-finite loss in model '" + model.name + "' at step " +
                            std::to_string(step) + " (epoch " + std::to_string(epoch) + ")");
      }
      check_finite_gradients(lg.gradients, step);
      epoch_loss += lg.loss * static_cast<double>(count);
      for (auto& [idx_layer, g] : lg.gradients) {
        const bool frozen = model.frozen.count(idx_layer) != 0;
        auto& p = model.params_of(idx_layer);
        const bool is_bn = model.layer(idx_layer).kind == LayerKind::BatchNorm;
        // BN gamma is affine like a bias; it trains with the biases.
        const bool weight_trains = !frozen || (is_bn && cfg.train_frozen_biases);
        const bool bias_trains = !frozen || cfg.train_frozen_biases;
        if (weight_trains) adam_update(p.weight.values(), g.weight.values(), weight_state[idx_layer], cfg, step);
        if (bias_trains && p.bias) adam_update(p.bias->values(), g.bias->values(), bias_state[idx_layer], cfg, step);
      }
    }
    epoch_loss /= static_cast<double>(data.size());
    report.epoch_losses.push_back(epoch_loss);
    report.epochs_run = epoch + 1;
    if (cfg.patience > 0) {
      if (epoch_loss < best) {
        best = epoch_loss;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
  }
  report.final_loss = report.epoch_losses.empty() ? 0.0 : report.epoch_losses.back();
  report.accuracy = evaluate(model, data);
  return report;
}

std::vector<int> predict(const ModelGraph& model, const Tensor& inputs) {
  constexpr std::size_t kChunk = 256;
  const std::size_t n = inputs.dim(0);
  const std::size_t stride = inputs.size() / n;
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t begin = 0; begin < n; begin += kChunk) {
    const std::size_t count = std::min(kChunk, n - begin);
    Shape shape = inputs.shape();
    shape[0] = count;
    Tensor chunk(shape, std::vector<float>(inputs.data() + begin * stride,
                                           inputs.data() + (begin + count) * stride));
    Tensor logits = forward(model, chunk);
    const std::size_t classes = logits.dim(1);
    for (std::size_t s = 0; s < count; ++s) {
      const float* z = logits.data() + s * classes;
      out.push_back(static_cast<int>(std::max_element(z, z + classes) - z));
    }
  }
  return out;
}

double evaluate(const ModelGraph& model, const LabeledDataset& data) {
  if (data.size() == 0) return 0.0;
  const auto pred = predict(model, data.inputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double gradient_check(const std::function<double(std::span<const double>)>& f,
                      std::span<const double> analytic, std::span<const double> theta, double h) {
  std::vector<double> probe(theta.begin(), theta.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double up = f(probe);
    probe[i] = saved - h;
    const double down = f(probe);
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
    worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
  }
  return worst;
}

double gradient_check(const ModelGraphD& model, const TensorD& inputs, std::span<const int> labels,
                      const GradientCheckOptions& options) {
  ModelGraphD work = model;
  auto analytic = loss_and_gradients(work, inputs, labels, options.bn_mode, false);
  if (options.corrupt) options.corrupt(analytic.gradients);
  std::mt19937_64 rng(options.seed);
  double worst = 0.0;
  auto loss_at = [&]() { return loss_and_gradients(work, inputs, labels, options.bn_mode, false).loss; };
  auto check_tensor = [&](TensorD& param, const TensorD& grad) {
    std::vector<std::size_t> idx(param.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(idx.size(), options.samples_per_tensor));
    for (std::size_t i : idx) {
      const double saved = param[i];
      param[i] = saved + options.h;
      const double up = loss_at();
      param[i] = saved - options.h;
      const double down = loss_at();
      param[i] = saved;
      const double numeric = (up - down) / (2.0 * options.h);
      const double denom = std::max({std::abs(numeric), std::abs(grad[i]), 1e-8});
      worst = std::max(worst, std::abs(numeric - grad[i]) / denom);
    }
  };
  for (auto& [idx, p] : work.params) {
    const auto& g = analytic.gradients.at(idx);
    check_tensor(p.weight, g.weight);
    if (p.bias) check_tensor(*p.bias, *g.bias);
  }
  return worst;
}

}  // namespace mmpq
