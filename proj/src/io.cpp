#include "mmpq/io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mmpq {

using nlohmann::json;

namespace {

json tensor_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.values()}}; }

Tensor tensor_from(const json& j) { return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<float>>()); }

}  // namespace

json to_json(const ModelGraph& model) {
  json layers = json::array();
  for (const auto& s : model.layers) {
    layers.push_back({{"kind", to_string(s.kind)},
                      {"index", s.layer_index},
                      {"in", s.in},
                      {"out", s.out},
                      {"stride", s.stride},
                      {"padding", s.padding},
                      {"pool", s.pool}});
  }
  json params = json::object();
  for (const auto& [idx, p] : model.params) {
    json e{{"weight", tensor_json(p.weight)}};
    if (p.bias) e["bias"] = tensor_json(*p.bias);
    if (p.running_mean) e["running_mean"] = tensor_json(*p.running_mean);
    if (p.running_var) e["running_var"] = tensor_json(*p.running_var);
    params[std::to_string(idx)] = std::move(e);
  }
  return {{"name", model.name}, {"input_shape", model.input_shape}, {"layers", layers}, {"params", params}};
}

ModelGraph model_from_json(const json& j) {
  ModelGraph m;
  m.name = j.at("name").get<std::string>();
  m.input_shape = j.at("input_shape").get<Shape>();
  for (const auto& l : j.at("layers")) {
    LayerSpec s;
    s.kind = layer_kind_from_string(l.at("kind").get<std::string>());
    s.layer_index = l.at("index").get<int>();
    s.in = l.at("in").get<std::size_t>();
    s.out = l.at("out").get<std::size_t>();
    s.stride = l.at("stride").get<int>();
    s.padding = l.at("padding").get<int>();
    s.pool = l.at("pool").get<int>();
    m.layers.push_back(s);
  }
  for (const auto& [key, e] : j.at("params").items()) {
    LayerParams<float> p;
    p.weight = tensor_from(e.at("weight"));
    if (e.contains("bias")) p.bias = tensor_from(e["bias"]);
    if (e.contains("running_mean")) p.running_mean = tensor_from(e["running_mean"]);
    if (e.contains("running_var")) p.running_var = tensor_from(e["running_var"]);
    m.params.emplace(std::stoi(key), std::move(p));
  }
  validate(m);
  return m;
}

json to_json(const CodebookPair& pair) {
  json groups = json::array();
  for (GroupId g : {GroupId::G3x3, GroupId::G1x1FC}) {
    json subs = json::array();
    for (const auto& s : pair.group(g).subs) subs.push_back({{"k", s.k}, {"dsub", s.dsub}, {"codewords", s.codewords}});
    groups.push_back({{"group", to_string(g)}, {"subs", subs}});
  }
  return {{"groups", groups}, {"hash", pair.hash()}};
}

CodebookPair codebooks_from_json(const json& j) {
  Codebook cb[2];
  for (int g = 0; g < 2; ++g) {
    cb[g].group = static_cast<GroupId>(g);
    for (const auto& s : j.at("groups").at(g).at("subs")) {
      cb[g].subs.push_back(
          {s.at("k").get<std::size_t>(), s.at("dsub").get<std::size_t>(), s.at("codewords").get<std::vector<float>>()});
    }
  }
  CodebookPair pair(std::move(cb[0]), std::move(cb[1]), true);
  if (j.contains("hash") && j["hash"].get<std::uint64_t>() != pair.hash()) {
    throw std::invalid_argument("codebook file hash mismatch");
  }
  return pair;
}

json to_json(const CompressedModel& model) {
  json codes = json::object();
  for (const auto& [idx, cm] : model.codes) {
    codes[std::to_string(idx)] = {{"group", static_cast<int>(cm.group)}, {"rows", cm.rows}, {"m", cm.m}, {"codes", cm.codes}};
  }
  return {{"model", to_json(model.model)}, {"codes", codes}, {"escape_layers", model.escape_layers}};
}

CompressedModel compressed_from_json(const json& j) {
  CompressedModel m;
  m.model = model_from_json(j.at("model"));
  for (const auto& [key, c] : j.at("codes").items()) {
    CodeMatrix cm;
    cm.group = static_cast<GroupId>(c.at("group").get<int>());
    cm.rows = c.at("rows").get<std::size_t>();
    cm.m = c.at("m").get<std::size_t>();
    cm.codes = c.at("codes").get<std::vector<Code>>();
    m.codes.emplace(std::stoi(key), std::move(cm));
  }
  m.escape_layers = j.at("escape_layers").get<std::set<int>>();
  return m;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

std::vector<std::byte> read_binary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<char> raw{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  std::vector<std::byte> out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

void write_binary_file(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace mmpq
