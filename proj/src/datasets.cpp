#include "mmpq/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

namespace mmpq {

namespace {

constexpr double kPi = std::numbers::pi;

// 5x7 glyphs, one string of '#'/'.' per row.
constexpr std::array<std::array<const char*, 7>, 10> kGlyphs = {{
    {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},
    {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},
    {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
    {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."},
    {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},
    {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},
    {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},
    {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},
    {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
    {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},
}};

LabeledDataset assemble(Shape sample, std::vector<float> values, std::vector<int> labels, std::size_t classes) {
  Shape full{labels.size()};
  full.insert(full.end(), sample.begin(), sample.end());
  LabeledDataset d{Tensor(full, std::move(values)), std::move(labels), classes};
  d.check();
  return d;
}

}  // namespace

LabeledDataset make_spirals(std::size_t n, std::uint64_t seed, std::size_t arms) {
  if (n == 0 || arms < 2) throw std::invalid_argument("spirals: need n > 0 and at least two arms");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::vector<float> xs;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const int arm = static_cast<int>(i % arms);
    const double t = unit(rng);
    const double r = 0.15 + 0.85 * t;
    const double theta = 3.0 * kPi * t + 2.0 * kPi * arm / static_cast<double>(arms);
    xs.push_back(static_cast<float>(r * std::cos(theta) + noise(rng)));
    xs.push_back(static_cast<float>(r * std::sin(theta) + noise(rng)));
    labels.push_back(arm);
  }
  return assemble({2}, std::move(xs), std::move(labels), arms);
}

LabeledDataset make_digits(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("digits: n must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> shift_x(0, 3), shift_y(0, 1);
  std::uniform_real_distribution<double> gain(0.6, 1.2);
  std::normal_distribution<double> noise(0.0, 0.55);
  std::vector<float> xs;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const int digit = static_cast<int>(i % 10);
    const int dx = shift_x(rng), dy = shift_y(rng);
    const double g = gain(rng);
    std::array<double, 64> img{};
    for (int y = 0; y < 7; ++y) {
      for (int x = 0; x < 5; ++x) {
        if (kGlyphs[digit][y][x] == '#') img[(y + dy) * 8 + (x + dx)] = g;
      }
    }
    std::array<double, 64> edge{};
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        const double right = x + 1 < 8 ? img[y * 8 + x + 1] : 0.0;
        edge[y * 8 + x] = right - img[y * 8 + x];
      }
    }
    for (double v : img) xs.push_back(static_cast<float>(v + noise(rng)));
    for (double v : edge) xs.push_back(static_cast<float>(v + noise(rng)));
    labels.push_back(digit);
  }
  return assemble({2, 8, 8}, std::move(xs), std::move(labels), 10);
}

LabeledDataset make_textures(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("textures: n must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> period(3.0, 8.0), phase(0.0, 2.0 * kPi), amp(0.5, 1.0);
  std::normal_distribution<double> noise(0.0, 1.3);
  std::vector<float> xs;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % 4);
    const double w = 2.0 * kPi / period(rng), p = phase(rng), a = amp(rng), q = phase(rng);
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        double v = 0.0;
        switch (cls) {
          case 0: v = std::sin(w * y + p); break;
          case 1: v = std::sin(w * x + p); break;
          case 2: v = std::sin(w * (x + y) / std::numbers::sqrt2 + p); break;
          default: v = std::sin(w * x + p) * std::sin(w * y + q) * 1.5; break;
        }
        xs.push_back(static_cast<float>(a * v + noise(rng)));
      }
    }
    labels.push_back(cls);
  }
  return assemble({1, 16, 16}, std::move(xs), std::move(labels), 4);
}

LabeledDataset make_rings(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("rings: n must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * kPi), band(-0.25, 0.25);
  std::normal_distribution<double> noise(0.0, 0.12);
  constexpr std::array<double, 3> radii = {0.5, 1.1, 1.7};
  std::vector<float> xs;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % radii.size());
    const double r = radii[cls] + band(rng), t = angle(rng);
    xs.push_back(static_cast<float>(r * std::cos(t) + noise(rng)));
    xs.push_back(static_cast<float>(r * std::sin(t) + noise(rng)));
    labels.push_back(cls);
  }
  return assemble({2}, std::move(xs), std::move(labels), radii.size());
}

LabeledDataset make_dataset(const std::string& generator, std::size_t n, std::uint64_t seed) {
  if (generator == "spirals") return make_spirals(n, seed);
  if (generator == "digits") return make_digits(n, seed);
  if (generator == "textures") return make_textures(n, seed);
  if (generator == "rings") return make_rings(n, seed);
  throw std::invalid_argument("unknown dataset generator '" + generator + "'");
}

DatasetSplits split_dataset(const LabeledDataset& data, double test_fraction, double holdout_fraction,
                            std::uint64_t seed) {
  if (test_fraction <= 0.0 || holdout_fraction < 0.0 || test_fraction + holdout_fraction >= 1.0) {
    throw std::invalid_argument("split fractions must be positive and sum below 1");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * data.size()));
  const auto n_hold = static_cast<std::size_t>(std::llround(holdout_fraction * data.size()));
  if (n_test == 0 || n_test + n_hold >= data.size()) throw std::invalid_argument("dataset too small to split");
  auto take = [&](std::size_t begin, std::size_t count) {
    std::vector<std::size_t> idx(order.begin() + begin, order.begin() + begin + count);
    LabeledDataset out{data.gather(idx), {}, data.num_classes};
    for (std::size_t i : idx) out.labels.push_back(data.labels[i]);
    return out;
  };
  DatasetSplits s;
  s.test = take(0, n_test);
  if (n_hold > 0) s.holdout = take(n_test, n_hold);
  s.train = take(n_test + n_hold, data.size() - n_test - n_hold);
  return s;
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxParseError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& path) {
  if (off + 4 > b.size()) {
    throw IdxParseError(path.string() + ": truncated header, expected at least " + std::to_string(off + 4) +
                        " bytes, file has " + std::to_string(b.size()));
  }
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

std::string hex32(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace

LabeledDataset ingest_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                          std::size_t num_classes) {
  if (num_classes == 0) throw std::invalid_argument("ingest_idx: class count must be positive");
  const auto img = read_file(images);
  const auto lab = read_file(labels);
  if (const auto magic = be32(img, 0, images); magic != 0x00000803u) {
    throw IdxParseError(images.string() + ": bad image magic " + hex32(magic) + " at byte offset 0, expected 0x00000803");
  }
  if (const auto magic = be32(lab, 0, labels); magic != 0x00000801u) {
    throw IdxParseError(labels.string() + ": bad label magic " + hex32(magic) + " at byte offset 0, expected 0x00000801");
  }
  const std::size_t n = be32(img, 4, images), h = be32(img, 8, images), w = be32(img, 12, images);
  const std::size_t n_labels = be32(lab, 4, labels);
  if (n == 0 || h == 0 || w == 0) throw IdxParseError(images.string() + ": zero dimension at byte offset 4");
  if (n_labels != n) {
    throw IdxParseError(labels.string() + ": " + std::to_string(n_labels) + " labels at byte offset 4, images file has " +
                        std::to_string(n));
  }
  const std::size_t expect_img = 16 + n * h * w, expect_lab = 8 + n;
  if (img.size() != expect_img) {
    throw IdxParseError(images.string() + ": expected " + std::to_string(expect_img) + " bytes, file has " +
                        std::to_string(img.size()));
  }
  if (lab.size() != expect_lab) {
    throw IdxParseError(labels.string() + ": expected " + std::to_string(expect_lab) + " bytes, file has " +
                        std::to_string(lab.size()));
  }
  LabeledDataset d;
  d.num_classes = num_classes;
  std::vector<float> values(n * h * w);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(img[16 + i]) / 255.0f;
  d.inputs = Tensor({n, 1, h, w}, std::move(values));
  for (std::size_t i = 0; i < n; ++i) {
    const int label = lab[8 + i];
    if (static_cast<std::size_t>(label) >= num_classes) {
      throw IdxParseError(labels.string() + ": label " + std::to_string(label) + " at byte offset " +
                          std::to_string(8 + i) + " is not below the class count " + std::to_string(num_classes));
    }
    d.labels.push_back(label);
  }
  return d;
}

void write_idx(const LabeledDataset& data, const std::filesystem::path& images, const std::filesystem::path& labels) {
  const Shape& s = data.inputs.shape();
  if (s.size() != 4 || s[1] != 1) throw std::invalid_argument("write_idx: expected (N, 1, H, W) images");
  std::ofstream img(images, std::ios::binary), lab(labels, std::ios::binary);
  if (!img || !lab) throw std::runtime_error("write_idx: cannot open output files");
  put_be32(img, 0x00000803u);
  put_be32(img, static_cast<std::uint32_t>(s[0]));
  put_be32(img, static_cast<std::uint32_t>(s[2]));
  put_be32(img, static_cast<std::uint32_t>(s[3]));
  for (float v : data.inputs.values()) {
    img.put(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  put_be32(lab, 0x00000801u);
  put_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) {
    if (l < 0 || l > 255) throw std::invalid_argument("write_idx: label does not fit a byte");
    lab.put(static_cast<char>(l));
  }
}

}  // namespace mmpq
