#include "mmpq/pq.hpp"

#include <bit>
#include <cstring>
#include <future>
#include <limits>
#include <stdexcept>
#include <string>

namespace mmpq {

CodebookPair::CodebookPair(Codebook g3x3, Codebook g1x1fc, bool frozen)
    : g3x3_(std::move(g3x3)), g1x1fc_(std::move(g1x1fc)), frozen_(frozen) {
  g3x3_.group = GroupId::G3x3;
  g1x1fc_.group = GroupId::G1x1FC;
}

Codebook& CodebookPair::mutable_group(GroupId g) {
  if (frozen_) throw std::logic_error("codebook pair is frozen; codewords are immutable");
  return g == GroupId::G3x3 ? g3x3_ : g1x1fc_;
}

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t CodebookPair::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Codebook* cb : {&g3x3_, &g1x1fc_}) {
    const std::uint64_t geometry[3] = {cb->m(), cb->k(), cb->dsub()};
    h = fnv1a(std::as_bytes(std::span(geometry)), h);
    for (const auto& sub : cb->subs) h = fnv1a(std::as_bytes(std::span(sub.codewords)), h);
  }
  return h;
}

Codebook learn_codebook(const WeightPool& pool, std::size_t k, std::size_t m, std::uint64_t seed,
                        std::vector<KMeansResult>* diagnostics) {
  if (k == 0 || !std::has_single_bit(k)) throw std::invalid_argument("K must be a power of two");
  if (m == 0 || pool.d % m != 0) throw std::invalid_argument("pool width not divisible by M");
  const std::size_t dsub = pool.d / m;
  std::vector<std::size_t> kept;
  for (std::size_t r = 0; r < pool.rows(); ++r) {
    if (!pool.row_is_padding(r)) kept.push_back(r);
  }
  if (kept.size() < k) {
    throw std::invalid_argument("group " + std::string(to_string(pool.group)) + " has " +
                                std::to_string(kept.size()) + " rows, fewer than K=" + std::to_string(k) +
                                "; use a smaller K");
  }
  std::vector<std::future<KMeansResult>> jobs;
  for (std::size_t slot = 0; slot < m; ++slot) {
    std::vector<float> slice(kept.size() * dsub);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      std::copy_n(pool.vectors.data() + kept[i] * pool.d + slot * dsub, dsub, slice.data() + i * dsub);
    }
    KMeansConfig cfg;
    cfg.k = k;
    cfg.seed = seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(pool.group) * 16 + slot + 1));
    jobs.push_back(std::async(std::launch::async, [slice = std::move(slice), dsub, cfg] {
      return kmeans(slice, dsub, cfg);
    }));
  }
  Codebook cb;
  cb.group = pool.group;
  for (auto& job : jobs) {
    KMeansResult r = job.get();
    cb.subs.push_back({k, dsub, r.centroids});
    if (diagnostics) diagnostics->push_back(std::move(r));
  }
  return cb;
}

CodebookPair learn_codebooks(const PoolPair& pools, std::size_t k, std::uint64_t seed, const GroupConfig& cfg,
                             std::vector<KMeansResult>* diagnostics) {
  cfg.check();
  if (pools.g3x3.d != cfg.d3x3 || pools.g1x1fc.d != cfg.d1x1fc) {
    throw std::invalid_argument("pool widths do not match the group config");
  }
  // A group no model contributes rows to stays empty.
  auto learn = [&](const WeightPool& pool, std::vector<KMeansResult>* diag) {
    if (pool.rows() == 0) {
      Codebook empty;
      empty.group = pool.group;
      return empty;
    }
    return learn_codebook(pool, k, cfg.m, seed, diag);
  };
  auto g3 = std::async(std::launch::async, [&] {
    std::vector<KMeansResult> diag;
    auto cb = learn(pools.g3x3, diagnostics ? &diag : nullptr);
    return std::make_pair(std::move(cb), std::move(diag));
  });
  std::vector<KMeansResult> diag1;
  Codebook g1 = learn(pools.g1x1fc, diagnostics ? &diag1 : nullptr);
  auto [g3cb, diag3] = g3.get();
  if (diagnostics) {
    diagnostics->insert(diagnostics->end(), diag3.begin(), diag3.end());
    diagnostics->insert(diagnostics->end(), diag1.begin(), diag1.end());
  }
  return CodebookPair(std::move(g3cb), std::move(g1), true);
}

EncodeResult encode(std::span<const float> vector, const Codebook& codebook) {
  if (vector.size() != codebook.d()) {
    throw std::invalid_argument("encode: vector length " + std::to_string(vector.size()) + " != d=" +
                                std::to_string(codebook.d()) + " of group " +
                                std::string(to_string(codebook.group)));
  }
  EncodeResult result;
  result.codes.resize(codebook.m());
  const std::size_t dsub = codebook.dsub();
  for (std::size_t s = 0; s < codebook.m(); ++s) {
    const auto& sub = codebook.subs[s];
    std::span<const float> part = vector.subspan(s * dsub, dsub);
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t c = 0; c < sub.k; ++c) {
      const double d = squared_distance(part, sub.codeword(c));
      if (d < best) {
        best = d;
        arg = c;
      }
    }
    result.codes[s] = static_cast<Code>(arg);
    result.squared_error += best;
  }
  return result;
}

EncodeResult encode(std::span<const float> vector, const CodebookPair& pair, GroupId group) {
  return encode(vector, pair.group(group));
}

CodeMatrix encode_rows(std::span<const float> rows, const Codebook& codebook, double* squared_error) {
  const std::size_t d = codebook.d();
  if (d == 0 || rows.size() % d != 0) throw std::invalid_argument("encode_rows: length not a multiple of d");
  CodeMatrix out{codebook.group, rows.size() / d, codebook.m(), {}};
  out.codes.reserve(out.rows * out.m);
  double total = 0.0;
  for (std::size_t r = 0; r < out.rows; ++r) {
    auto res = encode(rows.subspan(r * d, d), codebook);
    out.codes.insert(out.codes.end(), res.codes.begin(), res.codes.end());
    total += res.squared_error;
  }
  if (squared_error) *squared_error = total;
  return out;
}

void decode_rows(const CodeMatrix& codes, const Codebook& codebook, std::span<float> out) {
  const std::size_t d = codebook.d(), dsub = codebook.dsub();
  if (codes.m != codebook.m() || codes.group != codebook.group) {
    throw std::invalid_argument("decode: code matrix does not match codebook group");
  }
  if (out.size() != codes.rows * d) throw std::invalid_argument("decode: output size mismatch");
  for (std::size_t r = 0; r < codes.rows; ++r) {
    for (std::size_t s = 0; s < codes.m; ++s) {
      const Code c = codes.codes[r * codes.m + s];
      if (c >= codebook.subs[s].k) throw std::out_of_range("code " + std::to_string(c) + " >= K");
      auto cw = codebook.subs[s].codeword(c);
      std::copy(cw.begin(), cw.end(), out.begin() + static_cast<std::ptrdiff_t>(r * d + s * dsub));
    }
  }
}

CodeMatrix encode_layer(const Tensor& weight, LayerKind kind, const CodebookPair& pair, double* squared_error) {
  const Codebook& cb = pair.group(group_of(kind));
  WeightPool pool{cb.group, cb.d(), {}, {}};
  append_to_pool(pool, "", 0, weight);
  return encode_rows(pool.vectors, cb, squared_error);
}

Tensor decode_layer(const CodeMatrix& codes, const CodebookPair& pair, const Shape& shape) {
  const Codebook& cb = pair.group(codes.group);
  const std::size_t d = cb.d();
  std::vector<float> rows(codes.rows * d);
  decode_rows(codes, cb, rows);
  const auto [expected_rows, pad] = row_layout(shape_numel(shape), d);
  ProvenanceEntry entry{"", 0, 0, codes.rows, pad, shape};
  if (expected_rows != codes.rows) {
    throw std::invalid_argument("code matrix has " + std::to_string(codes.rows) + " rows, shape " +
                                shape_to_string(shape) + " needs " + std::to_string(expected_rows));
  }
  return unpool_layer(rows, d, entry);
}

ModelCodes encode_model(const ModelGraph& model, const CodebookPair& pair, std::map<int, double>* layer_errors) {
  if (!pair.frozen()) throw std::invalid_argument("encode_model requires a frozen codebook pair");
  ModelCodes out;
  for (const auto& spec : model.layers) {
    if (!is_weight_layer(spec.kind)) continue;
    double err = 0.0;
    out.emplace(spec.layer_index, encode_layer(model.params_of(spec.layer_index).weight, spec.kind, pair, &err));
    if (layer_errors) (*layer_errors)[spec.layer_index] = err;
  }
  return out;
}

ModelGraph reconstruct_model(const ModelCodes& codes, const CodebookPair& pair, const ModelGraph& skeleton,
                             const std::set<int>& escape_layers) {
  ModelGraph out = skeleton;
  for (const auto& spec : skeleton.layers) {
    if (!is_weight_layer(spec.kind) || escape_layers.count(spec.layer_index)) continue;
    auto it = codes.find(spec.layer_index);
    if (it == codes.end()) {
      throw std::invalid_argument("reconstruct: no codes for compressed layer " +
                                  std::to_string(spec.layer_index) + " of '" + skeleton.name + "'");
    }
    if (it->second.group != group_of(spec.kind)) {
      throw std::invalid_argument("reconstruct: layer " + std::to_string(spec.layer_index) +
                                  " codes belong to the wrong group");
    }
    auto& w = out.params_of(spec.layer_index).weight;
    w = decode_layer(it->second, pair, w.shape());
  }
  return out;
}

}  // namespace mmpq
