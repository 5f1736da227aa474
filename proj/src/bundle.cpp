#include "mmpq/bundle.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>
#include <set>

namespace mmpq {

std::string_view to_string(ByteCategory c) {
  switch (c) {
    case ByteCategory::Header: return "header";
    case ByteCategory::Directory: return "directory";
    case ByteCategory::Codebooks: return "codebooks";
    case ByteCategory::Descriptors: return "descriptors";
    case ByteCategory::QuantParams: return "quant_params";
    case ByteCategory::Codes: return "codes";
    case ByteCategory::Escapes: return "escapes";
    case ByteCategory::Biases: return "biases";
    case ByteCategory::BatchNorm: return "batch_norm";
  }
  return "?";
}

std::size_t ByteAccounting::total() const {
  std::size_t n = 0;
  for (std::size_t v : totals) n += v;
  return n;
}

const EncodedModel& DeploymentBundle::model(const std::string& name) const {
  for (const auto& m : models) {
    if (m.name == name) return m;
  }
  throw std::invalid_argument("bundle has no model named '" + name + "'");
}

const BundleIndex::Entry& BundleIndex::entry(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw std::invalid_argument("bundle has no model named '" + name + "'");
}

namespace {

using Tally = std::array<std::size_t, kByteCategoryCount>;

class Writer {
 public:
  explicit Writer(Tally* tally) : tally_(tally) {}

  void u8(std::uint64_t v, ByteCategory c) { put(v, 1, c); }
  void u16(std::uint64_t v, ByteCategory c) { put(v, 2, c); }
  void u32(std::uint64_t v, ByteCategory c) { put(v, 4, c); }
  void u64(std::uint64_t v, ByteCategory c) { put(v, 8, c); }
  void f32(float v, ByteCategory c) { put(std::bit_cast<std::uint32_t>(v), 4, c); }
  void i8(std::int8_t v, ByteCategory c) { put(static_cast<std::uint8_t>(v), 1, c); }
  void raw(std::span<const std::byte> b, ByteCategory c) {
    out_.insert(out_.end(), b.begin(), b.end());
    count(b.size(), c);
  }

  std::vector<std::byte>& bytes() { return out_; }

 private:
  void put(std::uint64_t v, int width, ByteCategory c) {
    for (int i = 0; i < width; ++i) out_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
    count(static_cast<std::size_t>(width), c);
  }
  void count(std::size_t n, ByteCategory c) {
    if (tally_) (*tally_)[static_cast<std::size_t>(c)] += n;
  }

  std::vector<std::byte> out_;
  Tally* tally_;
};

class Reader {
 public:
  Reader(std::span<const std::byte> bytes, std::size_t pos, std::size_t end, Tally* tally)
      : bytes_(bytes), pos_(pos), end_(end), tally_(tally) {}

  std::uint64_t u8(ByteCategory c) { return get(1, c); }
  std::uint64_t u16(ByteCategory c) { return get(2, c); }
  std::uint64_t u32(ByteCategory c) { return get(4, c); }
  std::uint64_t u64(ByteCategory c) { return get(8, c); }
  float f32(ByteCategory c) { return std::bit_cast<float>(static_cast<std::uint32_t>(get(4, c))); }
  std::int8_t i8(ByteCategory c) { return static_cast<std::int8_t>(static_cast<std::uint8_t>(get(1, c))); }
  std::span<const std::byte> raw(std::size_t n, ByteCategory c) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    count(n, c);
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return end_ - pos_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw BundleFormatError(what + " (at byte offset " + std::to_string(pos_) + ")");
  }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) {
      throw BundleFormatError("truncated bundle: need " + std::to_string(n) + " bytes at offset " +
                              std::to_string(pos_) + ", only " + std::to_string(end_ - pos_) + " remain");
    }
  }
  std::uint64_t get(int width, ByteCategory c) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    count(static_cast<std::size_t>(width), c);
    return v;
  }
  void count(std::size_t n, ByteCategory c) {
    if (tally_) (*tally_)[static_cast<std::size_t>(c)] += n;
  }

  std::span<const std::byte> bytes_;
  std::size_t pos_;
  std::size_t end_;
  Tally* tally_;
};

template <typename T>
T checked(std::uint64_t v, std::uint64_t limit, const std::string& what) {
  if (v > limit) throw std::invalid_argument(what + " value " + std::to_string(v) + " does not fit the bundle field");
  return static_cast<T>(v);
}

std::size_t code_width(std::size_t k) { return k <= 256 ? 1 : 2; }

void write_qp(Writer& w, const QuantParams& qp) {
  w.f32(qp.scale, ByteCategory::QuantParams);
  w.i8(qp.zero_point, ByteCategory::QuantParams);
}

QuantParams read_qp(Reader& r) {
  QuantParams qp;
  qp.scale = r.f32(ByteCategory::QuantParams);
  qp.zero_point = r.i8(ByteCategory::QuantParams);
  if (!(qp.scale > 0.0f) || !std::isfinite(qp.scale)) r.fail("quantization scale must be positive and finite");
  return qp;
}

void write_shape(Writer& w, const Shape& shape) {
  w.u8(checked<std::uint8_t>(shape.size(), 255, "rank"), ByteCategory::Descriptors);
  for (std::size_t d : shape) w.u16(checked<std::uint16_t>(d, 65535, "extent"), ByteCategory::Descriptors);
}

Shape read_shape(Reader& r) {
  const std::size_t rank = r.u8(ByteCategory::Descriptors);
  if (rank == 0) r.fail("shape of rank 0");
  Shape s(rank);
  for (auto& d : s) {
    d = r.u16(ByteCategory::Descriptors);
    if (d == 0) r.fail("zero extent in shape");
  }
  return s;
}

void write_codebooks(Writer& w, const F16CodebookPair& pair) {
  for (GroupId g : {GroupId::G3x3, GroupId::G1x1FC}) {
    const F16Codebook& cb = pair.group(g);
    w.u8(static_cast<std::uint8_t>(g), ByteCategory::Codebooks);
    w.u8(checked<std::uint8_t>(cb.m(), 255, "M"), ByteCategory::Codebooks);
    w.u8(checked<std::uint8_t>(cb.dsub(), 255, "dsub"), ByteCategory::Codebooks);
    w.u16(checked<std::uint16_t>(cb.k(), 32768, "K"), ByteCategory::Codebooks);
    for (const auto& sub : cb.subs) {
      if (sub.k != cb.k() || sub.dsub != cb.dsub() || sub.codewords.size() != sub.k * sub.dsub) {
        throw std::invalid_argument("ragged sub-codebooks in group " + std::string(to_string(g)));
      }
      for (std::uint16_t h : sub.codewords) w.u16(h, ByteCategory::Codebooks);
    }
  }
}

F16CodebookPair read_codebooks(Reader& r, BundleIndex* index) {
  F16CodebookPair pair;
  for (GroupId g : {GroupId::G3x3, GroupId::G1x1FC}) {
    if (r.u8(ByteCategory::Codebooks) != static_cast<std::uint8_t>(g)) r.fail("codebook groups out of order");
    const std::size_t m = r.u8(ByteCategory::Codebooks);
    const std::size_t dsub = r.u8(ByteCategory::Codebooks);
    const std::size_t k = r.u16(ByteCategory::Codebooks);
    if (k > 32768 || (k != 0 && !std::has_single_bit(k))) r.fail("K must be a power of two no larger than 32768");
    if ((k == 0) != (m == 0) || (m != 0 && dsub == 0)) r.fail("inconsistent codebook geometry");
    if (index) index->groups[static_cast<std::size_t>(g)] = {r.pos(), m, k, dsub};
    F16Codebook& cb = g == GroupId::G3x3 ? pair.g3x3 : pair.g1x1fc;
    for (std::size_t s = 0; s < m; ++s) {
      F16SubCodebook sub{k, dsub, std::vector<std::uint16_t>(k * dsub)};
      for (auto& h : sub.codewords) h = static_cast<std::uint16_t>(r.u16(ByteCategory::Codebooks));
      cb.subs.push_back(std::move(sub));
    }
  }
  return pair;
}

void write_record(Writer& w, const EncodedModel& model, const F16CodebookPair& pair) {
  if (model.name.empty() || model.name.size() > 255) throw std::invalid_argument("model name must be 1..255 bytes");
  w.u8(model.name.size(), ByteCategory::Descriptors);
  w.raw(std::as_bytes(std::span(model.name)), ByteCategory::Descriptors);
  write_shape(w, model.input_shape);
  write_qp(w, model.input_qp);
  w.u16(checked<std::uint16_t>(model.layers.size(), 65535, "layer count"), ByteCategory::Descriptors);
  for (const auto& layer : model.layers) {
    const LayerSpec& s = layer.spec;
    w.u8(static_cast<std::uint8_t>(s.kind), ByteCategory::Descriptors);
    w.u16(checked<std::uint16_t>(s.layer_index, 65535, "layer index"), ByteCategory::Descriptors);
    w.u16(checked<std::uint16_t>(s.in, 65535, "in"), ByteCategory::Descriptors);
    w.u16(checked<std::uint16_t>(s.out, 65535, "out"), ByteCategory::Descriptors);
    w.u8(checked<std::uint8_t>(s.stride, 255, "stride"), ByteCategory::Descriptors);
    w.u8(checked<std::uint8_t>(s.padding, 255, "padding"), ByteCategory::Descriptors);
    w.u8(checked<std::uint8_t>(s.pool, 255, "pool"), ByteCategory::Descriptors);
    write_qp(w, layer.output_qp);
    if (is_weight_layer(s.kind)) {
      w.u8(static_cast<std::uint8_t>(layer.storage), ByteCategory::Descriptors);
      write_shape(w, layer.weight_shape);
      write_qp(w, layer.weight_qp);
      w.u8(layer.bias ? 1 : 0, ByteCategory::Descriptors);
      if (layer.storage == WeightStorage::Codes) {
        if (!layer.codes) throw std::invalid_argument("layer " + std::to_string(s.layer_index) + " has no codes");
        const CodeMatrix& cm = *layer.codes;
        const F16Codebook& cb = pair.group(cm.group);
        if (cb.k() == 0 || cm.m != cb.m()) {
          throw std::invalid_argument("layer " + std::to_string(s.layer_index) +
                                      " codes do not reference the bundle codebooks");
        }
        w.u8(static_cast<std::uint8_t>(cm.group), ByteCategory::Descriptors);
        w.u32(checked<std::uint32_t>(cm.rows, 0xffffffffu, "rows"), ByteCategory::Descriptors);
        const std::size_t width = code_width(cb.k());
        w.u8(width, ByteCategory::Descriptors);
        for (Code c : cm.codes) {
          if (c >= cb.k()) throw std::invalid_argument("code out of range for K=" + std::to_string(cb.k()));
          if (width == 1) w.u8(c, ByteCategory::Codes);
          else w.u16(c, ByteCategory::Codes);
        }
      } else {
        if (layer.int8_weights.size() != shape_numel(layer.weight_shape)) {
          throw std::invalid_argument("layer " + std::to_string(s.layer_index) + " int8 weight count mismatch");
        }
        w.raw(std::as_bytes(std::span(layer.int8_weights)), ByteCategory::Escapes);
      }
      if (layer.bias) {
        if (layer.bias->size() != s.out) throw std::invalid_argument("bias length mismatch");
        for (float b : *layer.bias) w.f32(b, ByteCategory::Biases);
      }
    } else if (s.kind == LayerKind::BatchNorm) {
      w.f32(layer.bn_epsilon, ByteCategory::BatchNorm);
      for (const auto* v : {&layer.gamma, &layer.beta, &layer.mean, &layer.var}) {
        if (v->size() != s.in) throw std::invalid_argument("batch-norm vector length mismatch");
        for (float x : *v) w.f32(x, ByteCategory::BatchNorm);
      }
    }
  }
}

EncodedModel read_record(Reader& r, const F16CodebookPair& pair) {
  EncodedModel model;
  const std::size_t name_len = r.u8(ByteCategory::Descriptors);
  if (name_len == 0) r.fail("empty model name");
  auto name = r.raw(name_len, ByteCategory::Descriptors);
  model.name.assign(reinterpret_cast<const char*>(name.data()), name.size());
  model.input_shape = read_shape(r);
  model.input_qp = read_qp(r);
  const std::size_t count = r.u16(ByteCategory::Descriptors);
  for (std::size_t i = 0; i < count; ++i) {
    EncodedLayer layer;
    LayerSpec& s = layer.spec;
    const auto kind = r.u8(ByteCategory::Descriptors);
    if (kind > static_cast<std::uint8_t>(LayerKind::SoftmaxClassifier)) r.fail("unknown layer kind " + std::to_string(kind));
    s.kind = static_cast<LayerKind>(kind);
    s.layer_index = static_cast<int>(r.u16(ByteCategory::Descriptors));
    if (s.layer_index != static_cast<int>(i + 1)) r.fail("layer indices are not 1..L in order");
    s.in = r.u16(ByteCategory::Descriptors);
    s.out = r.u16(ByteCategory::Descriptors);
    s.stride = static_cast<int>(r.u8(ByteCategory::Descriptors));
    s.padding = static_cast<int>(r.u8(ByteCategory::Descriptors));
    s.pool = static_cast<int>(r.u8(ByteCategory::Descriptors));
    layer.output_qp = read_qp(r);
    if (is_weight_layer(s.kind)) {
      const auto storage = r.u8(ByteCategory::Descriptors);
      if (storage != 1 && storage != 2) r.fail("unknown weight storage " + std::to_string(storage));
      layer.storage = static_cast<WeightStorage>(storage);
      layer.weight_shape = read_shape(r);
      layer.weight_qp = read_qp(r);
      const auto has_bias = r.u8(ByteCategory::Descriptors);
      if (has_bias > 1) r.fail("bad bias flag");
      const std::size_t numel = shape_numel(layer.weight_shape);
      if (layer.storage == WeightStorage::Codes) {
        const auto g = r.u8(ByteCategory::Descriptors);
        if (g > 1 || static_cast<GroupId>(g) != group_of(s.kind)) r.fail("code group does not match layer kind");
        const F16Codebook& cb = pair.group(static_cast<GroupId>(g));
        if (cb.k() == 0) r.fail("codes reference an empty codebook");
        CodeMatrix cm{static_cast<GroupId>(g), r.u32(ByteCategory::Descriptors), cb.m(), {}};
        const std::size_t width = r.u8(ByteCategory::Descriptors);
        if (width != code_width(cb.k())) r.fail("code width does not match K");
        if (cm.rows != row_layout(numel, cb.d()).first) r.fail("code row count does not match weight shape");
        cm.codes.resize(cm.rows * cm.m);
        for (auto& c : cm.codes) {
          c = static_cast<Code>(width == 1 ? r.u8(ByteCategory::Codes) : r.u16(ByteCategory::Codes));
          if (c >= cb.k()) r.fail("code " + std::to_string(c) + " >= K");
        }
        layer.codes = std::move(cm);
      } else {
        auto raw = r.raw(numel, ByteCategory::Escapes);
        layer.int8_weights.resize(numel);
        std::memcpy(layer.int8_weights.data(), raw.data(), numel);
      }
      if (has_bias) {
        layer.bias.emplace(s.out);
        for (float& b : *layer.bias) b = r.f32(ByteCategory::Biases);
      }
    } else if (s.kind == LayerKind::BatchNorm) {
      layer.bn_epsilon = r.f32(ByteCategory::BatchNorm);
      for (auto* v : {&layer.gamma, &layer.beta, &layer.mean, &layer.var}) {
        v->resize(s.in);
        for (float& x : *v) x = r.f32(ByteCategory::BatchNorm);
      }
    }
    model.layers.push_back(std::move(layer));
  }
  return model;
}

struct Parsed {
  BundleIndex index;
  F16CodebookPair codebooks;
};

Parsed parse_head(std::span<const std::byte> bytes, Tally* tally) {
  Reader r(bytes, 0, bytes.size(), tally);
  auto magic = r.raw(4, ByteCategory::Header);
  if (std::memcmp(magic.data(), kBundleMagic.data(), 4) != 0) {
    std::string got;
    for (std::byte b : magic) {
      const auto c = static_cast<unsigned char>(b);
      got += (c >= 32 && c < 127) ? static_cast<char>(c) : '?';
    }
    throw BundleFormatError("bad magic '" + got + "' at byte offset 0, expected 'YNB1'");
  }
  const auto version = r.u16(ByteCategory::Header);
  if (version != kBundleVersion) {
    throw BundleFormatError("unsupported bundle version " + std::to_string(version) + " at byte offset 4");
  }
  const std::size_t count = r.u16(ByteCategory::Header);
  Parsed p;
  p.index.codebook_bytes = r.u32(ByteCategory::Header);
  p.index.codebook_hash = r.u64(ByteCategory::Header);
  std::vector<BundleIndex::Entry> entries(count);
  for (auto& e : entries) {
    e.offset = static_cast<std::uint32_t>(r.u32(ByteCategory::Directory));
    e.length = static_cast<std::uint32_t>(r.u32(ByteCategory::Directory));
    e.original_f32_bytes = static_cast<std::uint32_t>(r.u32(ByteCategory::Directory));
  }
  p.index.codebook_offset = r.pos();
  p.codebooks = read_codebooks(r, &p.index);
  if (r.pos() - p.index.codebook_offset != p.index.codebook_bytes) {
    r.fail("codebook section is " + std::to_string(r.pos() - p.index.codebook_offset) + " bytes, header declares " +
           std::to_string(p.index.codebook_bytes));
  }
  if (p.codebooks.hash() != p.index.codebook_hash) r.fail("codebook hash mismatch");
  std::size_t expect = r.pos();
  for (std::size_t i = 0; i < count; ++i) {
    if (entries[i].offset != expect) {
      throw BundleFormatError("model " + std::to_string(i) + " record starts at " + std::to_string(entries[i].offset) +
                              ", expected " + std::to_string(expect));
    }
    expect += entries[i].length;
  }
  if (expect > bytes.size()) {
    throw BundleFormatError("truncated bundle: directory describes " + std::to_string(expect) +
                            " bytes, file ends at offset " + std::to_string(bytes.size()));
  }
  if (expect < bytes.size()) {
    throw BundleFormatError(std::to_string(bytes.size() - expect) + " trailing bytes after the last model record");
  }
  // Names are needed for seeking; read just the name prefix of each record.
  for (auto& e : entries) {
    Reader nr(bytes, e.offset, e.offset + e.length, nullptr);
    const std::size_t n = nr.u8(ByteCategory::Descriptors);
    auto name = nr.raw(n, ByteCategory::Descriptors);
    e.name.assign(reinterpret_cast<const char*>(name.data()), name.size());
  }
  p.index.entries = std::move(entries);
  return p;
}

EncodedModel parse_record(std::span<const std::byte> bytes, const BundleIndex::Entry& e, const F16CodebookPair& pair,
                          Tally* tally) {
  Reader r(bytes, e.offset, e.offset + e.length, tally);
  EncodedModel m = read_record(r, pair);
  if (r.remaining() != 0) r.fail("model record '" + m.name + "' has " + std::to_string(r.remaining()) + " unread bytes");
  m.original_f32_bytes = e.original_f32_bytes;
  return m;
}

}  // namespace

std::vector<std::byte> serialize(const DeploymentBundle& bundle, ByteAccounting* accounting) {
  Tally head{};
  Tally cb_tally{};
  Writer cbw(&cb_tally);
  write_codebooks(cbw, bundle.codebooks);

  std::set<std::string> names;
  std::vector<std::vector<std::byte>> records;
  std::vector<Tally> tallies(bundle.models.size());
  for (std::size_t i = 0; i < bundle.models.size(); ++i) {
    if (!names.insert(bundle.models[i].name).second) {
      throw std::invalid_argument("duplicate model name '" + bundle.models[i].name + "'");
    }
    Writer rw(&tallies[i]);
    write_record(rw, bundle.models[i], bundle.codebooks);
    records.push_back(std::move(rw.bytes()));
  }

  Writer w(&head);
  w.raw(std::as_bytes(std::span(kBundleMagic)), ByteCategory::Header);
  w.u16(kBundleVersion, ByteCategory::Header);
  w.u16(checked<std::uint16_t>(bundle.models.size(), 65535, "model count"), ByteCategory::Header);
  w.u32(cbw.bytes().size(), ByteCategory::Header);
  w.u64(bundle.codebooks.hash(), ByteCategory::Header);
  std::size_t offset = kBundleHeaderBytes + kDirectoryEntryBytes * records.size() + cbw.bytes().size();
  for (std::size_t i = 0; i < records.size(); ++i) {
    w.u32(checked<std::uint32_t>(offset, 0xffffffffu, "record offset"), ByteCategory::Directory);
    w.u32(records[i].size(), ByteCategory::Directory);
    w.u32(bundle.models[i].original_f32_bytes, ByteCategory::Directory);
    offset += records[i].size();
  }
  w.raw(cbw.bytes(), ByteCategory::Codebooks);
  for (const auto& rec : records) w.bytes().insert(w.bytes().end(), rec.begin(), rec.end());

  if (accounting) {
    *accounting = {};
    accounting->totals = head;  // includes the codebook bytes copied in above
    for (std::size_t i = 0; i < records.size(); ++i) {
      accounting->per_model[bundle.models[i].name] = tallies[i];
      for (std::size_t c = 0; c < kByteCategoryCount; ++c) accounting->totals[c] += tallies[i][c];
    }
  }
  return std::move(w.bytes());
}

DeploymentBundle deserialize(std::span<const std::byte> bytes, ByteAccounting* accounting) {
  Tally head{};
  Parsed p = parse_head(bytes, accounting ? &head : nullptr);
  DeploymentBundle bundle;
  bundle.codebooks = std::move(p.codebooks);
  if (accounting) {
    *accounting = {};
    accounting->totals = head;
  }
  std::set<std::string> names;
  for (const auto& e : p.index.entries) {
    Tally t{};
    bundle.models.push_back(parse_record(bytes, e, bundle.codebooks, accounting ? &t : nullptr));
    if (!names.insert(e.name).second) throw BundleFormatError("duplicate model name '" + e.name + "'");
    if (accounting) {
      accounting->per_model[e.name] = t;
      for (std::size_t c = 0; c < kByteCategoryCount; ++c) accounting->totals[c] += t[c];
    }
  }
  return bundle;
}

ByteAccounting account(std::span<const std::byte> bytes) {
  ByteAccounting acc;
  deserialize(bytes, &acc);
  return acc;
}

BundleIndex index_bundle(std::span<const std::byte> bytes) { return parse_head(bytes, nullptr).index; }

EncodedModel read_model_record(std::span<const std::byte> bytes, const BundleIndex& index, const std::string& name) {
  // Only the codebook geometry is needed to parse a record.
  F16CodebookPair geometry;
  for (GroupId g : {GroupId::G3x3, GroupId::G1x1FC}) {
    const auto& gl = index.groups[static_cast<std::size_t>(g)];
    F16Codebook& cb = g == GroupId::G3x3 ? geometry.g3x3 : geometry.g1x1fc;
    for (std::size_t s = 0; s < gl.m; ++s) cb.subs.push_back({gl.k, gl.dsub, {}});
  }
  return parse_record(bytes, index.entry(name), geometry, nullptr);
}

// ---------------------------------------------------------------------------

ActivationCalibration calibrate_activations(const ModelGraph& model, const Tensor& samples) {
  ActivationCalibration cal;
  cal.input = calibrate(samples);
  const auto trace = forward_trace(model, samples);
  QuantParams prev = cal.input;
  bool behind_weight = false;  // the previous layer ends a weight-layer block
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerKind kind = model.layers[i].kind;
    const bool own = is_weight_layer(kind) ||
                     ((kind == LayerKind::BatchNorm || kind == LayerKind::ReLU) && behind_weight);
    if (kind == LayerKind::BatchNorm && !behind_weight) {
      throw std::invalid_argument("layer " + std::to_string(model.layers[i].layer_index) +
                                  ": batch norm must directly follow a convolution or fully-connected layer");
    }
    QuantParams qp = own ? calibrate(trace[i]) : prev;
    cal.outputs.push_back(qp);
    prev = qp;
    behind_weight = is_weight_layer(kind) || (kind == LayerKind::BatchNorm && behind_weight);
  }
  return cal;
}

std::vector<std::int8_t> offline_int8_weights(const EncodedLayer& layer, const F16CodebookPair& codebooks) {
  if (layer.storage == WeightStorage::Int8) return layer.int8_weights;
  if (!layer.codes) throw std::invalid_argument("compressed layer without codes");
  const CodebookPair wide = widen(codebooks);
  const Tensor w = decode_layer(*layer.codes, wide, layer.weight_shape);
  return quantize(w.values(), layer.weight_qp);
}

ModelGraph deployed_float_model(const EncodedModel& model, const F16CodebookPair& codebooks) {
  ModelGraph g;
  g.name = model.name;
  g.input_shape = model.input_shape;
  for (const auto& layer : model.layers) {
    g.layers.push_back(layer.spec);
    const int idx = layer.spec.layer_index;
    if (is_weight_layer(layer.spec.kind)) {
      LayerParams<float> p;
      p.weight = dequantize(offline_int8_weights(layer, codebooks), layer.weight_qp, layer.weight_shape);
      if (layer.bias) p.bias = Tensor({layer.bias->size()}, *layer.bias);
      g.params.emplace(idx, std::move(p));
    } else if (layer.spec.kind == LayerKind::BatchNorm) {
      const std::size_t c = layer.gamma.size();
      LayerParams<float> p;
      p.weight = Tensor({c}, layer.gamma);
      p.bias = Tensor({c}, layer.beta);
      p.running_mean = Tensor({c}, layer.mean);
      p.running_var = Tensor({c}, layer.var);
      g.params.emplace(idx, std::move(p));
    }
  }
  return g;
}

namespace {

EncodedModel build_encoded(const ModelGraph& model, const ModelCodes& codes, const std::set<int>& escape,
                           const F16CodebookPair& codebooks, const LabeledDataset& calibration,
                           std::size_t calibration_samples) {
  validate(model);
  const CodebookPair wide = widen(codebooks);
  EncodedModel enc;
  enc.name = model.name;
  enc.input_shape = model.input_shape;
  enc.original_f32_bytes = checked<std::uint32_t>(f32_parameter_bytes(model), 0xffffffffu, "original bytes");
  for (const auto& spec : model.layers) {
    EncodedLayer layer;
    layer.spec = spec;
    if (is_weight_layer(spec.kind)) {
      const auto& p = model.params_of(spec.layer_index);
      layer.weight_shape = p.weight.shape();
      if (p.bias) layer.bias = std::vector<float>(p.bias->values().begin(), p.bias->values().end());
      if (escape.count(spec.layer_index)) {
        layer.storage = WeightStorage::Int8;
        layer.weight_qp = calibrate(p.weight);
        layer.int8_weights = quantize(p.weight.values(), layer.weight_qp);
      } else {
        auto it = codes.find(spec.layer_index);
        if (it == codes.end()) {
          throw std::invalid_argument("no codes for compressed layer " + std::to_string(spec.layer_index) + " of '" +
                                      model.name + "'");
        }
        layer.storage = WeightStorage::Codes;
        layer.codes = it->second;
        layer.weight_qp = calibrate(decode_layer(it->second, wide, layer.weight_shape));
      }
    } else if (spec.kind == LayerKind::BatchNorm) {
      const auto& p = model.params_of(spec.layer_index);
      auto vec = [](const Tensor& t) { return std::vector<float>(t.values().begin(), t.values().end()); };
      layer.gamma = vec(p.weight);
      layer.beta = vec(*p.bias);
      layer.mean = vec(*p.running_mean);
      layer.var = vec(*p.running_var);
    }
    enc.layers.push_back(std::move(layer));
  }
  const std::size_t n = std::min(calibration_samples, calibration.size());
  if (n == 0) throw std::invalid_argument("calibration set is empty");
  const ModelGraph deployed = deployed_float_model(enc, codebooks);
  const auto cal = calibrate_activations(deployed, calibration.subset(0, n).inputs);
  enc.input_qp = cal.input;
  for (std::size_t i = 0; i < enc.layers.size(); ++i) enc.layers[i].output_qp = cal.outputs[i];
  return enc;
}

}  // namespace

EncodedModel encode_for_deployment(const CompressedModel& compressed, const F16CodebookPair& codebooks,
                                   const LabeledDataset& calibration, std::size_t calibration_samples) {
  return build_encoded(compressed.model, compressed.codes, compressed.escape_layers, codebooks, calibration,
                       calibration_samples);
}

EncodedModel encode_int8(const ModelGraph& model, const LabeledDataset& calibration, std::size_t calibration_samples) {
  const auto all = weight_layer_indices(model.layers);
  return build_encoded(model, {}, std::set<int>(all.begin(), all.end()), F16CodebookPair{}, calibration,
                       calibration_samples);
}

CompressionReport compression_ratio(std::span<const ModelGraph> originals, std::span<const std::byte> bundle) {
  const BundleIndex index = index_bundle(bundle);
  if (index.entries.size() != originals.size() || originals.empty()) {
    throw std::invalid_argument("bundle holds " + std::to_string(index.entries.size()) + " models, " +
                                std::to_string(originals.size()) + " originals given");
  }
  CompressionReport rep;
  rep.total_bundle_bytes = bundle.size();
  const double shared =
      static_cast<double>(kBundleHeaderBytes + index.codebook_bytes) / static_cast<double>(originals.size());
  for (std::size_t i = 0; i < originals.size(); ++i) {
    if (originals[i].name != index.entries[i].name) {
      throw std::invalid_argument("original '" + originals[i].name + "' does not match bundled '" +
                                  index.entries[i].name + "'");
    }
    ModelCompression mc;
    mc.name = originals[i].name;
    mc.original_bytes = f32_parameter_bytes(originals[i]);
    mc.bundle_bytes = static_cast<double>(index.entries[i].length + kDirectoryEntryBytes) + shared;
    rep.total_original_bytes += mc.original_bytes;
    rep.per_model.push_back(std::move(mc));
  }
  rep.ratio = static_cast<double>(rep.total_original_bytes) / static_cast<double>(rep.total_bundle_bytes);
  return rep;
}

}  // namespace mmpq
