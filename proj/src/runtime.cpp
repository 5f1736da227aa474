#include "mmpq/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>

namespace mmpq {

ArenaCapacityError::ArenaCapacityError(std::size_t required, std::size_t available)
    : std::runtime_error("arena capacity exceeded: model needs " + std::to_string(required) + " bytes, arena has " +
                         std::to_string(available)),
      required_(required),
      available_(available) {}

Arena::Arena(std::size_t capacity) : capacity_(capacity), storage_(new std::byte[capacity > 0 ? capacity : 1]) {
  if (capacity == 0) throw std::invalid_argument("arena capacity must be positive");
}

std::byte* Arena::allocate(std::size_t bytes) {
  constexpr std::size_t kAlign = 8;
  const std::size_t start = (used_ + kAlign - 1) / kAlign * kAlign;
  if (start + bytes > capacity_) throw ArenaCapacityError(start + bytes, capacity_);
  used_ = start + bytes;
  high_water_ = std::max(high_water_, used_);
  return storage_.get() + start;
}

void Arena::clear() {
  used_ = 0;
  resident_.reset();
  ++generation_;
}

struct ArenaAccess {
  static std::byte* allocate(Arena& a, std::size_t bytes) { return a.allocate(bytes); }
  static void clear(Arena& a) { a.clear(); }
  static void set_resident(Arena& a, std::string name) { a.resident_ = std::move(name); }
  static const std::byte* base(const Arena& a) { return a.storage_.get(); }
};

namespace {

struct Requant {
  std::int64_t multiplier;
  std::int64_t offset;
  std::int32_t shift;
};

struct ResidentOp {
  LayerKind kind;
  int layer_index;
  std::uint32_t in_c, in_h, in_w;
  std::uint32_t out_c, out_h, out_w;
  std::uint32_t stride, padding, pool;
  std::uint32_t kernel;
  float w_scale;
  std::int8_t w_zp;
  std::int8_t in_zp;
  std::int8_t out_zp;
  bool relu;
  std::uint64_t weight_offset;
  std::uint64_t weight_count;
  std::uint64_t requant_offset;
};

struct ResidentHeader {
  std::uint32_t op_count;
  std::uint32_t input_rank;
  std::uint32_t input_c, input_h, input_w;
  std::uint32_t num_classes;
  float input_scale;
  std::int8_t input_zp;
  float output_scale;
  std::int8_t output_zp;
  std::uint64_t ops_offset;
  std::uint64_t ping_offset;
  std::uint64_t pong_offset;
};

constexpr std::size_t align8(std::size_t n) { return (n + 7) / 8 * 8; }

struct Dims {
  std::uint32_t c = 1, h = 1, w = 1;
  std::size_t numel() const { return static_cast<std::size_t>(c) * h * w; }
};

Dims dims_of(const Shape& s) {
  Dims d;
  d.c = static_cast<std::uint32_t>(s.at(0));
  if (s.size() == 3) {
    d.h = static_cast<std::uint32_t>(s[1]);
    d.w = static_cast<std::uint32_t>(s[2]);
  } else if (s.size() != 1) {
    throw std::invalid_argument("runtime supports per-sample ranks 1 and 3, got " + shape_to_string(s));
  }
  return d;
}

// One executed operation: a weight layer with any BN/ReLU folded behind it, or
// a standalone shape/pool/activation layer.
struct PlannedOp {
  std::size_t first;  // index into model.layers
  std::size_t last;   // inclusive
};

std::vector<PlannedOp> plan_ops(const EncodedModel& m) {
  std::vector<PlannedOp> ops;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const LayerKind k = m.layers[i].spec.kind;
    if (k == LayerKind::BatchNorm) {
      throw std::invalid_argument("layer " + std::to_string(m.layers[i].spec.layer_index) +
                                  ": batch norm must directly follow a convolution or fully-connected layer");
    }
    PlannedOp op{i, i};
    if (is_weight_layer(k)) {
      if (op.last + 1 < m.layers.size() && m.layers[op.last + 1].spec.kind == LayerKind::BatchNorm) ++op.last;
      if (op.last + 1 < m.layers.size() && m.layers[op.last + 1].spec.kind == LayerKind::ReLU) ++op.last;
    }
    ops.push_back(op);
    i = op.last;
  }
  return ops;
}

std::int8_t saturate(std::int64_t v) {
  return static_cast<std::int8_t>(std::clamp<std::int64_t>(v, -128, 127));
}

double u16_le_half(std::span<const std::byte> bundle, std::size_t offset) {
  const auto lo = static_cast<std::uint16_t>(bundle[offset]);
  const auto hi = static_cast<std::uint16_t>(bundle[offset + 1]);
  return half_to_float(static_cast<std::uint16_t>(lo | (hi << 8)));
}

}  // namespace

FixedPointMultiplier to_fixed_point(double real) {
  FixedPointMultiplier fp;
  if (!std::isfinite(real)) throw std::invalid_argument("requantization multiplier is not finite");
  if (real == 0.0) return fp;
  int exponent = 0;
  std::frexp(std::abs(real), &exponent);
  fp.shift = std::clamp(31 - exponent, 0, 46);
  const auto m = std::llround(std::ldexp(std::abs(real), fp.shift));
  if (m >= (1LL << 31)) throw std::invalid_argument("requantization multiplier too large: " + std::to_string(real));
  fp.multiplier = real < 0 ? -m : m;
  return fp;
}

std::int64_t apply_fixed_point(std::int64_t acc, const FixedPointMultiplier& fp, std::int64_t offset) {
  const std::int64_t total = acc * fp.multiplier + offset;
  if (fp.shift == 0) return total;
  return (total + (std::int64_t{1} << (fp.shift - 1))) >> fp.shift;
}

bool ResidentModel::valid() const { return arena_ && arena_->generation() == generation_ && !arena_->empty(); }

const std::byte* ResidentModel::base() const {
  if (!valid()) throw std::logic_error("resident model '" + name_ + "' is no longer loaded in its arena");
  return ArenaAccess::base(*arena_);
}

namespace {

const ResidentHeader& header_at(const std::byte* base) { return *reinterpret_cast<const ResidentHeader*>(base); }

const ResidentOp* ops_at(const std::byte* base) {
  return reinterpret_cast<const ResidentOp*>(base + header_at(base).ops_offset);
}

const ResidentOp& weight_op(const std::byte* base, int layer_index) {
  const auto& h = header_at(base);
  const ResidentOp* ops = ops_at(base);
  for (std::uint32_t i = 0; i < h.op_count; ++i) {
    if (is_weight_layer(ops[i].kind) && ops[i].layer_index == layer_index) return ops[i];
  }
  throw std::invalid_argument("no resident weight layer " + std::to_string(layer_index));
}

}  // namespace

std::span<const std::int8_t> ResidentModel::weights(int layer_index) const {
  const std::byte* b = base();
  const ResidentOp& op = weight_op(b, layer_index);
  return {reinterpret_cast<const std::int8_t*>(b + op.weight_offset), op.weight_count};
}

QuantParams ResidentModel::weight_qp(int layer_index) const {
  const ResidentOp& op = weight_op(base(), layer_index);
  return {op.w_scale, op.w_zp};
}

Shape ResidentModel::input_shape() const {
  const auto& h = header_at(base());
  if (h.input_rank == 1) return {h.input_c};
  return {h.input_c, h.input_h, h.input_w};
}

std::size_t ResidentModel::num_classes() const { return header_at(base()).num_classes; }

ResidentModel load_model(std::span<const std::byte> bundle, const std::string& model_name, Arena& arena,
                         LoadStats* stats) {
  const BundleIndex index = index_bundle(bundle);
  const EncodedModel enc = read_model_record(bundle, index, model_name);
  std::vector<LayerSpec> specs;
  for (const auto& l : enc.layers) specs.push_back(l.spec);
  const auto shapes = infer_shapes(enc.input_shape, specs);
  const auto plan = plan_ops(enc);

  // Plan every byte before touching the arena.
  std::size_t weight_bytes = 0, requant_bytes = 0, max_act = shape_numel(enc.input_shape);
  for (const auto& op : plan) {
    const auto& l = enc.layers[op.first];
    if (is_weight_layer(l.spec.kind)) {
      weight_bytes += align8(shape_numel(l.weight_shape));
      requant_bytes += align8(l.spec.out * sizeof(Requant));
    }
  }
  for (const auto& s : shapes) max_act = std::max(max_act, shape_numel(s));
  const std::size_t fixed = align8(sizeof(ResidentHeader)) + align8(plan.size() * sizeof(ResidentOp));
  const std::size_t required = fixed + requant_bytes + weight_bytes + 2 * align8(max_act);
  if (required > arena.capacity()) throw ArenaCapacityError(required, arena.capacity());

  ArenaAccess::clear(arena);
  LoadStats st;
  st.arena_bytes = required;
  const auto entry = index.entry(model_name);
  st.bytes_read = entry.length;
  st.uncompressed_bytes_read = entry.length;
  try {
    std::byte* base = ArenaAccess::allocate(arena, sizeof(ResidentHeader));
    auto* ops = reinterpret_cast<ResidentOp*>(ArenaAccess::allocate(arena, plan.size() * sizeof(ResidentOp)));
    const std::byte* origin = ArenaAccess::base(arena);
    const Dims in = dims_of(enc.input_shape);
    ResidentHeader h{};
    h.op_count = static_cast<std::uint32_t>(plan.size());
    h.input_rank = static_cast<std::uint32_t>(enc.input_shape.size());
    h.input_c = in.c;
    h.input_h = in.h;
    h.input_w = in.w;
    h.num_classes = static_cast<std::uint32_t>(mmpq::num_classes(specs));
    h.input_scale = enc.input_qp.scale;
    h.input_zp = enc.input_qp.zero_point;
    h.ops_offset = static_cast<std::uint64_t>(reinterpret_cast<std::byte*>(ops) - origin);

    QuantParams cur = enc.input_qp;
    Dims cur_dims = in;
    for (std::size_t oi = 0; oi < plan.size(); ++oi) {
      const auto& [first, last] = plan[oi];
      const EncodedLayer& l = enc.layers[first];
      const Dims out = dims_of(shapes[last]);
      ResidentOp op{};
      op.kind = l.spec.kind;
      op.layer_index = l.spec.layer_index;
      op.in_c = cur_dims.c;
      op.in_h = cur_dims.h;
      op.in_w = cur_dims.w;
      op.out_c = out.c;
      op.out_h = out.h;
      op.out_w = out.w;
      op.stride = static_cast<std::uint32_t>(l.spec.stride);
      op.padding = static_cast<std::uint32_t>(l.spec.padding);
      op.pool = static_cast<std::uint32_t>(l.spec.pool);
      op.in_zp = cur.zero_point;
      const QuantParams out_qp = enc.layers[last].output_qp;
      op.out_zp = out_qp.zero_point;
      op.relu = enc.layers[last].spec.kind == LayerKind::ReLU;
      if (is_weight_layer(l.spec.kind)) {
        op.kernel = l.spec.kind == LayerKind::Conv3x3 ? 3 : 1;
        op.w_scale = l.weight_qp.scale;
        op.w_zp = l.weight_qp.zero_point;
        const std::size_t numel = shape_numel(l.weight_shape);
        op.weight_count = numel;
        auto* w = reinterpret_cast<std::int8_t*>(ArenaAccess::allocate(arena, numel));
        op.weight_offset = static_cast<std::uint64_t>(reinterpret_cast<std::byte*>(w) - origin);
        if (l.storage == WeightStorage::Int8) {
          std::memcpy(w, l.int8_weights.data(), numel);
          st.uncompressed_bytes_read = st.uncompressed_bytes_read - numel + numel * sizeof(float);
        } else {
          const CodeMatrix& cm = *l.codes;
          const auto& g = index.groups[static_cast<std::size_t>(cm.group)];
          const std::size_t d = g.m * g.dsub;
          for (std::size_t r = 0; r < cm.rows; ++r) {
            for (std::size_t s = 0; s < cm.m; ++s) {
              const std::size_t cw = g.data_offset + ((s * g.k + cm.codes[r * cm.m + s]) * g.dsub) * 2;
              for (std::size_t j = 0; j < g.dsub; ++j) {
                const std::size_t pos = r * d + s * g.dsub + j;
                if (pos >= numel) break;
                w[pos] = quantize_value(static_cast<float>(u16_le_half(bundle, cw + 2 * j)), l.weight_qp);
              }
              st.bytes_read += g.dsub * 2;
            }
          }
          const std::size_t code_bytes = cm.codes.size() * (g.k <= 256 ? 1 : 2);
          st.uncompressed_bytes_read = st.uncompressed_bytes_read - code_bytes + numel * sizeof(float);
        }
        st.bytes_written += numel;

        // Fold bias and an optional BN into a per-channel fixed-point requantization.
        auto* rq = reinterpret_cast<Requant*>(ArenaAccess::allocate(arena, l.spec.out * sizeof(Requant)));
        op.requant_offset = static_cast<std::uint64_t>(reinterpret_cast<std::byte*>(rq) - origin);
        const EncodedLayer* bn = (last > first && enc.layers[first + 1].spec.kind == LayerKind::BatchNorm)
                                     ? &enc.layers[first + 1]
                                     : nullptr;
        const double acc_scale = static_cast<double>(l.weight_qp.scale) * static_cast<double>(cur.scale);
        for (std::size_t c = 0; c < l.spec.out; ++c) {
          double a = 1.0, shift_term = 0.0;
          if (bn) {
            a = static_cast<double>(bn->gamma[c]) / std::sqrt(static_cast<double>(bn->var[c]) + bn->bn_epsilon);
            shift_term = static_cast<double>(bn->beta[c]) - static_cast<double>(bn->mean[c]) * a;
          }
          const double b = l.bias ? static_cast<double>((*l.bias)[c]) : 0.0;
          const auto fp = to_fixed_point(a * acc_scale / out_qp.scale);
          const double offset = (a * b + shift_term) / out_qp.scale * std::ldexp(1.0, fp.shift);
          if (!(std::abs(offset) < 0x1p62)) {
            throw std::invalid_argument("layer " + std::to_string(l.spec.layer_index) + ": bias term out of range");
          }
          rq[c] = {fp.multiplier, std::llround(offset), fp.shift};
        }
        st.bytes_written += l.spec.out * sizeof(Requant);
      }
      ops[oi] = op;
      cur = out_qp;
      cur_dims = out;
    }
    h.output_scale = cur.scale;
    h.output_zp = cur.zero_point;
    h.ping_offset = static_cast<std::uint64_t>(ArenaAccess::allocate(arena, align8(max_act)) - origin);
    h.pong_offset = static_cast<std::uint64_t>(ArenaAccess::allocate(arena, align8(max_act)) - origin);
    std::memcpy(base, &h, sizeof h);
    st.bytes_written += sizeof(ResidentHeader) + plan.size() * sizeof(ResidentOp);
    if (arena.used() != required) throw std::logic_error("arena plan mismatch");
  } catch (...) {
    ArenaAccess::clear(arena);
    throw;
  }
  ArenaAccess::set_resident(arena, model_name);
  if (stats) *stats = st;
  ResidentModel rm;
  rm.arena_ = &arena;
  rm.generation_ = arena.generation();
  rm.name_ = model_name;
  return rm;
}

namespace {

void run_weight_op(const ResidentOp& op, const std::int8_t* w, const Requant* rq, const std::int8_t* x,
                   std::int8_t* y) {
  const int wz = op.w_zp, xz = op.in_zp, oz = op.out_zp;
  const std::int64_t lo = op.relu ? std::max(-128, oz) : -128;
  auto finish = [&](std::int64_t acc, std::size_t c) {
    const Requant& r = rq[c];
    const std::int64_t q = apply_fixed_point(acc, {r.multiplier, r.shift}, r.offset) + oz;
    return static_cast<std::int8_t>(std::clamp<std::int64_t>(q, lo, 127));
  };
  if (op.kind == LayerKind::FullyConnected) {
    const std::size_t n_in = op.in_c * op.in_h * op.in_w;
    for (std::size_t o = 0; o < op.out_c; ++o) {
      const std::int8_t* row = w + o * n_in;
      std::int64_t acc = 0;
      for (std::size_t i = 0; i < n_in; ++i) acc += (row[i] - wz) * (x[i] - xz);
      y[o] = finish(acc, o);
    }
    return;
  }
  const int k = static_cast<int>(op.kernel), pad = static_cast<int>(op.padding), s = static_cast<int>(op.stride);
  const int ih = static_cast<int>(op.in_h), iw = static_cast<int>(op.in_w);
  for (std::size_t oc = 0; oc < op.out_c; ++oc) {
    for (std::uint32_t oy = 0; oy < op.out_h; ++oy) {
      for (std::uint32_t ox = 0; ox < op.out_w; ++ox) {
        std::int64_t acc = 0;
        for (std::size_t ic = 0; ic < op.in_c; ++ic) {
          const std::int8_t* wk = w + (oc * op.in_c + ic) * k * k;
          const std::int8_t* xc = x + ic * ih * iw;
          for (int ky = 0; ky < k; ++ky) {
            const int yy = static_cast<int>(oy) * s - pad + ky;
            if (yy < 0 || yy >= ih) continue;  // padding holds the zero point
            for (int kx = 0; kx < k; ++kx) {
              const int xx = static_cast<int>(ox) * s - pad + kx;
              if (xx < 0 || xx >= iw) continue;
              acc += (wk[ky * k + kx] - wz) * (xc[yy * iw + xx] - xz);
            }
          }
        }
        y[(oc * op.out_h + oy) * op.out_w + ox] = finish(acc, oc);
      }
    }
  }
}

void run_pool(const ResidentOp& op, const std::int8_t* x, std::int8_t* y) {
  const bool global = op.pool == 0;
  const std::uint32_t win_h = global ? op.in_h : op.pool, win_w = global ? op.in_w : op.pool;
  const std::uint32_t step_h = global ? 0 : op.pool, step_w = global ? 0 : op.pool;
  for (std::uint32_t c = 0; c < op.out_c; ++c) {
    for (std::uint32_t oy = 0; oy < op.out_h; ++oy) {
      for (std::uint32_t ox = 0; ox < op.out_w; ++ox) {
        int best = -129;
        std::int64_t sum = 0;
        for (std::uint32_t dy = 0; dy < win_h; ++dy) {
          for (std::uint32_t dx = 0; dx < win_w; ++dx) {
            const int v = x[(c * op.in_h + oy * step_h + dy) * op.in_w + ox * step_w + dx];
            best = std::max(best, v);
            sum += v;
          }
        }
        std::int8_t out;
        if (op.kind == LayerKind::MaxPool) {
          out = static_cast<std::int8_t>(best);
        } else {
          const std::int64_t n = static_cast<std::int64_t>(win_h) * win_w;
          out = saturate(sum >= 0 ? (sum + n / 2) / n : -((-sum + n / 2) / n));
        }
        y[(c * op.out_h + oy) * op.out_w + ox] = out;
      }
    }
  }
}

}  // namespace

Tensor infer(const ResidentModel& model, const Tensor& batch) {
  const std::byte* base = model.base();
  const ResidentHeader& h = header_at(base);
  const ResidentOp* ops = ops_at(base);
  const Shape in_shape = model.input_shape();
  if (batch.rank() != in_shape.size() + 1 || !std::equal(in_shape.begin(), in_shape.end(), batch.shape().begin() + 1)) {
    throw std::invalid_argument("infer: input shape " + shape_to_string(batch.shape()) + " does not match model input " +
                                shape_to_string(in_shape));
  }
  // Scratch lives in the arena; the const handle only guards the weights.
  auto* ping = reinterpret_cast<std::int8_t*>(const_cast<std::byte*>(base) + h.ping_offset);
  auto* pong = reinterpret_cast<std::int8_t*>(const_cast<std::byte*>(base) + h.pong_offset);
  const std::size_t n = batch.dim(0), sample = shape_numel(in_shape);
  const QuantParams in_qp{h.input_scale, h.input_zp};
  const QuantParams out_qp{h.output_scale, h.output_zp};
  Tensor out({n, h.num_classes});
  for (std::size_t i = 0; i < n; ++i) {
    std::int8_t* x = ping;
    std::int8_t* y = pong;
    for (std::size_t j = 0; j < sample; ++j) x[j] = quantize_value(batch[i * sample + j], in_qp);
    std::size_t width = sample;
    for (std::uint32_t oi = 0; oi < h.op_count; ++oi) {
      const ResidentOp& op = ops[oi];
      const std::size_t out_n = static_cast<std::size_t>(op.out_c) * op.out_h * op.out_w;
      switch (op.kind) {
        case LayerKind::Conv3x3:
        case LayerKind::Conv1x1:
        case LayerKind::FullyConnected:
          run_weight_op(op, reinterpret_cast<const std::int8_t*>(base + op.weight_offset),
                        reinterpret_cast<const Requant*>(base + op.requant_offset), x, y);
          break;
        case LayerKind::MaxPool:
        case LayerKind::AvgPool:
          run_pool(op, x, y);
          break;
        case LayerKind::ReLU:
          for (std::size_t j = 0; j < out_n; ++j) y[j] = std::max(x[j], op.in_zp);
          break;
        case LayerKind::Flatten:
        case LayerKind::SoftmaxClassifier:
          std::copy_n(x, out_n, y);
          break;
        case LayerKind::BatchNorm:
          throw std::logic_error("unfused batch norm");
      }
      std::swap(x, y);
      width = out_n;
    }
    if (width != h.num_classes) throw std::logic_error("final activation width does not match class count");
    for (std::size_t c = 0; c < width; ++c) out[i * width + c] = dequantize_value(x[c], out_qp);
  }
  return out;
}

std::vector<int> infer_labels(const ResidentModel& model, const Tensor& batch) {
  const Tensor scores = infer(model, batch);
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = scores.data() + i * c;
    labels[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return labels;
}

}  // namespace mmpq
