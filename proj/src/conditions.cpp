#include "scedit/conditions.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "scedit/errors.hpp"

namespace scedit {

namespace {

struct Rgb {
  double r, g, b;
};

constexpr Rgb kBinColors[kToyColorBins] = {
    {0.85, 0.15, 0.15},
    {0.15, 0.75, 0.20},
    {0.15, 0.25, 0.85},
    {0.90, 0.85, 0.15},
};

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

bool inside(int shape, double px, double py, double cx, double cy, double r) {
  const double dx = px - cx;
  const double dy = py - cy;
  switch (shape) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1:
      return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    default: {
      const double ax = cx, ay = cy - r;
      const double bx = cx - 0.95 * r, by = cy + 0.8 * r;
      const double qx = cx + 0.95 * r, qy = cy + 0.8 * r;
      auto side = [&](double x1, double y1, double x2, double y2) {
        return (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
      };
      const double s1 = side(ax, ay, bx, by);
      const double s2 = side(bx, by, qx, qy);
      const double s3 = side(qx, qy, ax, ay);
      return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
    }
  }
}

Tensor render(int shape, const Rgb& color, double cx, double cy, double r, int size) {
  constexpr int kSuper = 4;
  constexpr double kBackground = 0.5;
  Tensor img = Tensor::empty({1, 3, size, size});
  auto d = img.mutable_data<float>();
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          hits += inside(shape, x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper, cx, cy, r);
        }
      }
      const double cov = static_cast<double>(hits) / (kSuper * kSuper);
      const double rgb[3] = {color.r, color.g, color.b};
      const std::size_t at = static_cast<std::size_t>(y) * size + x;
      for (int c = 0; c < 3; ++c) {
        const double v = kBackground * (1.0 - cov) + rgb[c] * cov;
        d[c * plane + at] = static_cast<float>(2.0 * v - 1.0);
      }
    }
  }
  return img;
}

void require_image(const Tensor& image, const char* who) {
  if (image.rank() != 4) {
    throw ShapeError(std::string(who) + ": expected [N, C, H, W], got " + shape_str(image.shape()));
  }
}

}  // namespace

ToyDataset gen_toy_dataset(int n, int size, std::uint64_t seed,
                           const std::vector<std::string>& condition_types) {
  if (n < 0) throw ConfigError("dataset size must be >= 0");
  if (size < 8) throw ConfigError("image size must be >= 8");
  for (const auto& t : condition_types) condition_channels(t);
  ToyDataset data;
  data.size = size;
  data.seed = seed;
  data.condition_types = condition_types;

  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[i] = i % kToyLabels;
  std::mt19937_64 order(seed);
  std::shuffle(labels.begin(), labels.end(), order);

  data.samples.reserve(labels.size());
  for (int i = 0; i < n; ++i) {
    auto rng = sample_rng(seed, static_cast<std::uint64_t>(i));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int label = labels[i];
    const int shape = label / kToyColorBins;
    Rgb color = kBinColors[label % kToyColorBins];
    for (double* ch : {&color.r, &color.g, &color.b}) {
      *ch = std::clamp(*ch + 0.2 * (unit(rng) - 0.5), 0.0, 1.0);
    }
    const double r = size * (0.22 + 0.16 * unit(rng));
    const double cx = r + (size - 2 * r) * unit(rng);
    const double cy = r + (size - 2 * r) * unit(rng);
    const std::uint64_t cond_seed = rng();

    ToySample s;
    s.image = render(shape, color, cx, cy, r, size);
    s.label = label;
    for (const auto& t : condition_types) {
      s.conditions.types.push_back(t);
      s.conditions.maps.push_back(make_condition(t, s.image, cond_seed));
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

Tensor extract_edge(const Tensor& image, double threshold) {
  require_image(image, "extract_edge");
  const std::int64_t N = image.dim(0), C = image.dim(1), H = image.dim(2), W = image.dim(3);
  const auto src = image.to_vector();
  Tensor out = Tensor::zeros({N, 1, H, W}, image.dtype());
  std::vector<double> lum(static_cast<std::size_t>(H * W));
  std::vector<double> mag(lum.size());
  for (std::int64_t n = 0; n < N; ++n) {
    std::fill(lum.begin(), lum.end(), 0.0);
    for (std::int64_t c = 0; c < C; ++c) {
      const double* p = src.data() + (n * C + c) * H * W;
      for (std::int64_t i = 0; i < H * W; ++i) lum[i] += p[i];
    }
    for (double& v : lum) v /= static_cast<double>(C);
    auto at = [&](std::int64_t y, std::int64_t x) {
      y = std::clamp<std::int64_t>(y, 0, H - 1);
      x = std::clamp<std::int64_t>(x, 0, W - 1);
      return lum[y * W + x];
    };
    double peak = 0.0;
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                          (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
        const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                          (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
        mag[y * W + x] = std::sqrt(gx * gx + gy * gy);
        peak = std::max(peak, mag[y * W + x]);
      }
    }
    if (peak == 0.0) continue;
    visit_dtype(out.dtype(), [&]<class T>() {
      auto o = out.mutable_data<T>().subspan(static_cast<std::size_t>(n * H * W));
      for (std::int64_t i = 0; i < H * W; ++i) o[i] = mag[i] > threshold * peak ? T(1) : T(0);
    });
  }
  return out;
}

Tensor extract_color(const Tensor& image, int factor) {
  require_image(image, "extract_color");
  const std::int64_t N = image.dim(0), C = image.dim(1), H = image.dim(2), W = image.dim(3);
  if (factor < 1 || H % factor || W % factor) {
    throw ConfigError("extract_color: factor " + std::to_string(factor) + " does not divide " +
                      std::to_string(H) + "x" + std::to_string(W));
  }
  Tensor out = Tensor::empty(image.shape(), image.dtype());
  visit_dtype(image.dtype(), [&]<class T>() {
    auto src = image.data<T>();
    auto dst = out.mutable_data<T>();
    for (std::int64_t p = 0; p < N * C; ++p) {
      const T* s = src.data() + p * H * W;
      T* d = dst.data() + p * H * W;
      for (std::int64_t by = 0; by < H; by += factor) {
        for (std::int64_t bx = 0; bx < W; bx += factor) {
          double acc = 0.0;
          for (int y = 0; y < factor; ++y) {
            for (int x = 0; x < factor; ++x) acc += s[(by + y) * W + bx + x];
          }
          const T mean = static_cast<T>(acc / (static_cast<double>(factor) * factor));
          for (int y = 0; y < factor; ++y) {
            for (int x = 0; x < factor; ++x) d[(by + y) * W + bx + x] = mean;
          }
        }
      }
    }
  });
  return out;
}

Tensor random_mask(int size, std::uint64_t seed) {
  if (size < 4) throw ConfigError("random_mask: size must be >= 4");
  std::mt19937_64 rng(seed);
  const int lo = std::max(1, size / 8);
  const int hi = std::max(lo, size / 2);
  std::vector<float> grid(static_cast<std::size_t>(size) * size);
  for (;;) {
    std::fill(grid.begin(), grid.end(), 0.0f);
    const int count = std::uniform_int_distribution<int>(1, 4)(rng);
    for (int k = 0; k < count; ++k) {
      const int w = std::uniform_int_distribution<int>(lo, hi)(rng);
      const int h = std::uniform_int_distribution<int>(lo, hi)(rng);
      const int x0 = std::uniform_int_distribution<int>(0, size - w)(rng);
      const int y0 = std::uniform_int_distribution<int>(0, size - h)(rng);
      for (int y = y0; y < y0 + h; ++y) {
        std::fill_n(grid.begin() + static_cast<std::ptrdiff_t>(y) * size + x0, w, 1.0f);
      }
    }
    const double cover = std::accumulate(grid.begin(), grid.end(), 0.0) / static_cast<double>(grid.size());
    if (cover >= 0.1 && cover <= 0.5) break;
  }
  return Tensor::from_vector({1, 1, size, size}, std::span<const float>(grid));
}

MaskPair extract_mask(const Tensor& image, std::uint64_t seed) {
  require_image(image, "extract_mask");
  if (image.dim(2) != image.dim(3)) throw ShapeError("extract_mask: image must be square");
  MaskPair out;
  out.mask = random_mask(static_cast<int>(image.dim(2)), seed).to(image.dtype());
  out.masked = Tensor::empty(image.shape(), image.dtype());
  const std::int64_t plane = image.dim(2) * image.dim(3);
  visit_dtype(image.dtype(), [&]<class T>() {
    auto m = out.mask.data<T>();
    auto s = image.data<T>();
    auto d = out.masked.mutable_data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = s[i] * (T(1) - m[i % plane]);
  });
  return out;
}

Tensor make_condition(const std::string& type, const Tensor& image, std::uint64_t seed) {
  require_image(image, "make_condition");
  auto rescale = [](const Tensor& unit) {
    Tensor out = Tensor::empty(unit.shape(), unit.dtype());
    visit_dtype(unit.dtype(), [&]<class T>() {
      auto s = unit.data<T>();
      auto d = out.mutable_data<T>();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = T(2) * s[i] - T(1);
    });
    return out;
  };
  if (type == "edge") return rescale(extract_edge(image));
  if (type == "color") {
    return extract_color(image, std::max<int>(1, static_cast<int>(image.dim(2)) / 8));
  }
  if (type == "mask") {
    if (image.dim(0) != 1) throw ShapeError("make_condition: mask needs a single image");
    auto pair = extract_mask(image, seed);
    const Tensor parts[] = {rescale(pair.mask), pair.masked};
    Tensor out = Tensor::empty({1, 4, image.dim(2), image.dim(3)}, image.dtype());
    visit_dtype(image.dtype(), [&]<class T>() {
      auto d = out.mutable_data<T>();
      std::size_t at = 0;
      for (const auto& p : parts) {
        auto s = p.data<T>();
        std::copy(s.begin(), s.end(), d.begin() + static_cast<std::ptrdiff_t>(at));
        at += s.size();
      }
    });
    return out;
  }
  condition_channels(type);
  return {};
}

Tensor stack_batch(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("stack_batch: no tensors");
  Shape shape = parts.front().shape();
  const DType dtype = parts.front().dtype();
  std::int64_t n = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<int>(shape.size()) || p.dtype() != dtype ||
        !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw ShapeError("stack_batch: " + shape_str(p.shape()) + " does not match " + shape_str(shape));
    }
    n += p.dim(0);
  }
  shape[0] = n;
  Tensor out = Tensor::empty(shape, dtype);
  visit_dtype(dtype, [&]<class T>() {
    auto d = out.mutable_data<T>();
    std::size_t at = 0;
    for (const auto& p : parts) {
      auto s = p.data<T>();
      std::copy(s.begin(), s.end(), d.begin() + static_cast<std::ptrdiff_t>(at));
      at += s.size();
    }
  });
  return out;
}

ToyBatch make_batch(const ToyDataset& data, std::span<const int> indexes,
                    const std::vector<std::string>& condition_types, DType dtype) {
  if (indexes.empty()) throw ConfigError("make_batch: empty batch");
  ToyBatch b;
  std::vector<Tensor> images;
  std::vector<std::vector<Tensor>> conds(condition_types.size());
  for (int i : indexes) {
    const auto& s = data.samples.at(static_cast<std::size_t>(i));
    images.push_back(s.image.to(dtype));
    b.labels.push_back(s.label);
    for (std::size_t m = 0; m < condition_types.size(); ++m) {
      conds[m].push_back(s.conditions.get(condition_types[m]).to(dtype));
    }
  }
  b.x0 = stack_batch(images);
  for (std::size_t m = 0; m < condition_types.size(); ++m) {
    b.conds.types.push_back(condition_types[m]);
    b.conds.maps.push_back(stack_batch(conds[m]));
  }
  return b;
}

namespace {

void write_f32(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  const Tensor v = t.to(DType::kF32);
  auto d = v.data<float>();
  f.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
  if (!f) throw IoError("write failed: " + path.string());
}

Tensor read_f32(const std::filesystem::path& path, Shape shape) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  Tensor t = Tensor::empty(std::move(shape));
  auto d = t.mutable_data<float>();
  f.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
  if (f.gcount() != static_cast<std::streamsize>(d.size_bytes()) || f.peek() != EOF) {
    throw IoError("size mismatch in " + path.string());
  }
  return t;
}

}  // namespace

void export_dataset(const ToyDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["size"] = data.size;
  manifest["seed"] = data.seed;
  manifest["condition_types"] = data.condition_types;
  auto& samples = manifest["samples"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    const std::string stem = "sample_" + std::to_string(i);
    nlohmann::ordered_json entry;
    entry["id"] = i;
    entry["label"] = s.label;
    entry["image"] = stem + "_image.f32";
    write_f32(dir / (stem + "_image.f32"), s.image);
    for (const auto& t : data.condition_types) {
      entry["conditions"][t] = stem + "_" + t + ".f32";
      write_f32(dir / (stem + "_" + t + ".f32"), s.conditions.get(t));
    }
    samples.push_back(std::move(entry));
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << '\n';
}

ToyDataset import_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot read " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest.json: " + std::string(e.what()));
  }
  ToyDataset data;
  try {
    data.size = manifest.at("size").get<int>();
    data.seed = manifest.at("seed").get<std::uint64_t>();
    data.condition_types = manifest.at("condition_types").get<std::vector<std::string>>();
    const std::int64_t S = data.size;
    for (const auto& entry : manifest.at("samples")) {
      ToySample s;
      s.label = entry.at("label").get<int>();
      s.image = read_f32(dir / entry.at("image").get<std::string>(), {1, 3, S, S});
      for (const auto& t : data.condition_types) {
        s.conditions.types.push_back(t);
        s.conditions.maps.push_back(read_f32(dir / entry.at("conditions").at(t).get<std::string>(),
                                             {1, condition_channels(t), S, S}));
      }
      data.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest.json: " + std::string(e.what()));
  }
  return data;
}

}  // namespace scedit
