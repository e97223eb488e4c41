#pragma once

#include <array>
#include <cstdio>
#include <fstream>
#include <limits>

#include "swaat/tensor.hpp"

namespace swaat {

template <Real T>
struct Dataset {
  Tensor<T> images;                 // (n, C, H, W), values in [0, 1]
  std::vector<int> labels;          // in [0, classes)
  std::vector<std::uint32_t> ids;   // stable identity per example
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  Shape image_shape() const { return images.example_shape(); }

  Dataset subset(std::span<const std::size_t> index) const {
    Dataset d;
    d.images = gather(images, index);
    d.labels.reserve(index.size());
    d.ids.reserve(index.size());
    for (auto i : index) {
      d.labels.push_back(labels.at(i));
      d.ids.push_back(ids.at(i));
    }
    d.classes = classes;
    return d;
  }

  // First n examples (all of them when n is 0 or too large).
  Dataset head(std::size_t n) const {
    if (n == 0 || n >= size()) return *this;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return subset(idx);
  }

  template <Real U>
  Dataset<U> cast() const {
    return Dataset<U>{images.template cast<U>(), labels, ids, classes};
  }

  void validate() const {
    if (images.batch() != labels.size() || ids.size() != labels.size())
      throw FormatError("dataset: image, label and id counts differ");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= classes) throw FormatError("dataset: label out of range");
    for (const T v : images.storage())
      if (!(v >= T{0} && v <= T{1})) throw FormatError("dataset: pixel outside [0,1]");
  }
};

// ---------------------------------------------------------------------------
// IDX files

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw FormatError("idx: '" + path + "' is truncated");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UserError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path + "'");
}

// Header of an IDX file: returns the dimensions and the payload offset.
inline std::pair<std::vector<std::size_t>, std::size_t> idx_header(const std::vector<std::uint8_t>& b,
                                                                   std::uint32_t magic,
                                                                   const std::string& path) {
  const std::uint32_t m = read_be32(b, 0, path);
  if (m != magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad magic 0x%08x (expected 0x%08x)", m, magic);
    throw FormatError("idx: '" + path + "': " + buf);
  }
  const std::size_t rank = magic & 0xff;
  std::vector<std::size_t> dims(rank);
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = read_be32(b, 4 + 4 * i, path);
    if (dims[i] == 0) throw FormatError("idx: '" + path + "' has a zero dimension");
    if (count > std::numeric_limits<std::size_t>::max() / dims[i])
      throw FormatError("idx: '" + path + "' dimension product overflows");
    count *= dims[i];
  }
  const std::size_t offset = 4 + 4 * rank;
  if (b.size() - std::min(b.size(), offset) < count) throw FormatError("idx: '" + path + "' is truncated");
  if (b.size() - offset > count) throw FormatError("idx: '" + path + "' has trailing bytes");
  return {dims, offset};
}

}  // namespace detail

// Reads an IDX image/label pair. Pixels are scaled by 1/255. When classes is
// 0 it is inferred as max(label) + 1.
template <Real T = double>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path, std::size_t classes = 0) {
  const auto ib = detail::read_file(images_path);
  const auto lb = detail::read_file(labels_path);
  const auto [idims, ioff] = detail::idx_header(ib, kIdxImagesMagic, images_path);
  const auto [ldims, loff] = detail::idx_header(lb, kIdxLabelsMagic, labels_path);
  if (idims[0] != ldims[0])
    throw FormatError("idx: " + std::to_string(idims[0]) + " images but " + std::to_string(ldims[0]) + " labels");
  if (idims[0] > std::numeric_limits<std::uint32_t>::max()) throw FormatError("idx: too many examples");

  const std::size_t n = idims[0];
  Dataset<T> d;
  d.images = Tensor<T>({n, 1, idims[1], idims[2]}, Uninitialized{});
  T* px = d.images.data();
  for (std::size_t i = 0; i < d.images.size(); ++i) px[i] = static_cast<T>(ib[ioff + i]) / T{255};
  d.labels.resize(n);
  d.ids.resize(n);
  int top = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lb[loff + i];
    d.ids[i] = static_cast<std::uint32_t>(i);
    top = std::max(top, d.labels[i]);
  }
  d.classes = classes ? classes : static_cast<std::size_t>(top) + 1;
  for (int y : d.labels)
    if (static_cast<std::size_t>(y) >= d.classes)
      throw FormatError("idx: label " + std::to_string(y) + " out of range for " + std::to_string(d.classes) +
                        " classes");
  return d;
}

// Writes single-channel datasets; pixels are rounded to the nearest 1/255.
template <Real T>
void write_idx(const Dataset<T>& d, const std::string& images_path, const std::string& labels_path) {
  const Shape s = d.image_shape();
  if (s.size() != 3 || s[0] != 1) throw UserError("idx: only single-channel images can be written");
  for (int y : d.labels)
    if (y < 0 || y > 255) throw UserError("idx: label does not fit in a byte");
  std::vector<std::uint8_t> ib, lb;
  ib.reserve(16 + d.images.size());
  detail::put_be32(ib, kIdxImagesMagic);
  detail::put_be32(ib, static_cast<std::uint32_t>(d.size()));
  detail::put_be32(ib, static_cast<std::uint32_t>(s[1]));
  detail::put_be32(ib, static_cast<std::uint32_t>(s[2]));
  for (const T v : d.images.storage()) {
    const double q = std::round(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0);
    ib.push_back(static_cast<std::uint8_t>(q));
  }
  detail::put_be32(lb, kIdxLabelsMagic);
  detail::put_be32(lb, static_cast<std::uint32_t>(d.size()));
  for (int y : d.labels) lb.push_back(static_cast<std::uint8_t>(y));
  detail::write_file(images_path, ib);
  detail::write_file(labels_path, lb);
}

// ---------------------------------------------------------------------------
// Synthetic digit-like data

namespace detail {

struct Point {
  double x, y;
};

using Stroke = std::vector<Point>;

inline std::vector<Stroke> ellipse(double cx, double cy, double rx, double ry, int n = 14) {
  Stroke s;
  for (int i = 0; i <= n; ++i) {
    const double t = 2 * std::numbers::pi * i / n;
    s.push_back({cx + rx * std::cos(t), cy + ry * std::sin(t)});
  }
  return {s};
}

// Glyph skeletons in the unit square (x right, y down).
inline std::vector<Stroke> glyph(std::size_t cls) {
  switch (cls) {
    case 0: return ellipse(0.5, 0.5, 0.26, 0.36);
    case 1: return {{{0.38, 0.26}, {0.52, 0.13}, {0.52, 0.87}}};
    case 2: return {{{0.28, 0.3}, {0.38, 0.15}, {0.6, 0.13}, {0.72, 0.28}, {0.68, 0.45}, {0.28, 0.87}, {0.75, 0.87}}};
    case 3: return {{{0.3, 0.15}, {0.68, 0.15}, {0.48, 0.45}, {0.7, 0.6}, {0.68, 0.8}, {0.5, 0.88}, {0.28, 0.82}}};
    case 4: return {{{0.62, 0.88}, {0.62, 0.12}, {0.25, 0.62}, {0.78, 0.62}}};
    case 5:
      return {{{0.72, 0.13}, {0.34, 0.13}, {0.31, 0.45}, {0.55, 0.42}, {0.72, 0.58}, {0.68, 0.8}, {0.5, 0.88},
               {0.28, 0.82}}};
    case 6:
      return {{{0.68, 0.15}, {0.45, 0.25}, {0.3, 0.55}, {0.32, 0.8}, {0.5, 0.88}, {0.68, 0.78}, {0.68, 0.6},
               {0.5, 0.5}, {0.32, 0.6}}};
    case 7: return {{{0.25, 0.13}, {0.75, 0.13}, {0.42, 0.88}}};
    case 8: {
      auto a = ellipse(0.5, 0.3, 0.17, 0.16);
      a.push_back(ellipse(0.5, 0.67, 0.21, 0.2)[0]);
      return a;
    }
    case 9: {
      auto a = ellipse(0.5, 0.34, 0.2, 0.19);
      a.push_back({{0.7, 0.34}, {0.62, 0.88}});
      return a;
    }
    default: {
      // Further classes get a fixed pseudo-random scribble.
      Rng rng(derive_seed(0x5eed, "glyph", cls));
      Stroke s;
      const auto pts = 4 + rng.below(3);
      for (std::uint64_t i = 0; i < pts; ++i) s.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.15, 0.85)});
      return {s};
    }
  }
}

inline double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x, vy = b.y - a.y, wx = p.x - a.x, wy = p.y - a.y;
  const double len2 = vx * vx + vy * vy;
  const double t = len2 > 0 ? std::clamp((wx * vx + wy * vy) / len2, 0.0, 1.0) : 0.0;
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

// Anti-aliased rendering of thick polylines; adds into img with max().
inline void render(const std::vector<Stroke>& strokes, double half_width, double gain, std::size_t H,
                   std::size_t W, double* img) {
  const double px = 1.0 / static_cast<double>(std::max(H, W));
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const Point p{(static_cast<double>(c) + 0.5) / static_cast<double>(W),
                    (static_cast<double>(r) + 0.5) / static_cast<double>(H)};
      double d = 1e9;
      for (const auto& s : strokes)
        for (std::size_t i = 0; i + 1 < s.size(); ++i) d = std::min(d, segment_distance(p, s[i], s[i + 1]));
      const double v = std::clamp(0.5 + (half_width - d) / px, 0.0, 1.0) * gain;
      img[r * W + c] = std::max(img[r * W + c], v);
    }
}

}  // namespace detail

struct SynthOptions {
  std::size_t height = 28, width = 28;
};

// Deterministic digit-like images. Each class has a fixed glyph; difficulty
// scales the random affine jitter, stroke variation, clutter and pixel noise.
// At difficulty 0 every image is its class prototype plus uniform noise whose
// amplitude is below the nearest-centroid margin, so the set is linearly
// separable.
template <Real T = double>
Dataset<T> synth_dataset(std::uint64_t seed, std::size_t n, std::size_t classes, double difficulty,
                         SynthOptions opt = {}) {
  if (classes < 2) throw UserError("synth: need at least two classes");
  if (n < classes) throw UserError("synth: need n >= classes");
  if (difficulty < 0) throw UserError("synth: difficulty must be >= 0");
  if (classes > 256) throw UserError("synth: at most 256 classes");
  const std::size_t H = opt.height, W = opt.width, D = H * W;
  constexpr double kHalfWidth = 0.055;

  std::vector<std::vector<double>> proto(classes, std::vector<double>(D, 0.0));
  for (std::size_t c = 0; c < classes; ++c) detail::render(detail::glyph(c), kHalfWidth, 1.0, H, W, proto[c].data());

  // Noise bound for the separable case: for prototypes p_c, p_j the
  // nearest-centroid score gap is |p_c - p_j|^2 / 2 + (p_c - p_j).noise, so a
  // per-pixel perturbation below min |p_c - p_j|^2 / (2 |p_c - p_j|_1) keeps
  // every class on its own side. Quantization to 1/255 counts against it.
  double ratio = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < classes; ++a)
    for (std::size_t b = a + 1; b < classes; ++b) {
      double l2 = 0, l1 = 0;
      for (std::size_t i = 0; i < D; ++i) {
        const double d = proto[a][i] - proto[b][i];
        l2 += d * d;
        l1 += std::abs(d);
      }
      if (l1 == 0) throw Error("synth: identical class prototypes");
      ratio = std::min(ratio, l2 / l1);
    }
  const double margin = std::min(0.02, 0.5 * ratio - 1.0 / 255);
  if (margin <= 0) throw Error("synth: class prototypes too close for the separable setting");

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
  Rng order(derive_seed(seed, "synth-order"));
  order.shuffle(labels.begin(), labels.end());

  Dataset<T> ds;
  ds.images = Tensor<T>({n, 1, H, W}, Uninitialized{});
  ds.labels = labels;
  ds.ids.resize(n);
  ds.classes = classes;
  std::vector<double> img(D);
  const double dj = difficulty;
  for (std::size_t i = 0; i < n; ++i) {
    ds.ids[i] = static_cast<std::uint32_t>(i);
    Rng rng(derive_seed(seed, "synth-example", i));
    const auto cls = static_cast<std::size_t>(labels[i]);
    if (dj == 0) {
      img = proto[cls];
    } else {
      std::fill(img.begin(), img.end(), 0.0);
      const double scale = 1 + dj * rng.uniform(-0.12, 0.12);
      const double rot = dj * rng.uniform(-0.22, 0.22);
      const double shear = dj * rng.uniform(-0.2, 0.2);
      const double tx = dj * rng.uniform(-0.09, 0.09), ty = dj * rng.uniform(-0.09, 0.09);
      const double cr = std::cos(rot), sr = std::sin(rot);
      auto strokes = detail::glyph(cls);
      for (auto& s : strokes)
        for (auto& p : s) {
          double x = p.x - 0.5 + dj * 0.025 * rng.normal(), y = p.y - 0.5 + dj * 0.025 * rng.normal();
          x += shear * y;
          const double rx = scale * (cr * x - sr * y), ry = scale * (sr * x + cr * y);
          p = {rx + 0.5 + tx, ry + 0.5 + ty};
        }
      const double hw = kHalfWidth * (1 + dj * rng.uniform(-0.35, 0.35));
      const double gain = 1 - dj * rng.uniform(0.0, 0.3);
      detail::render(strokes, hw, gain, H, W, img.data());
      if (rng.uniform() < 0.5 * std::min(dj, 1.0)) {
        detail::Stroke clutter;
        const detail::Point a{rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)};
        clutter.push_back(a);
        clutter.push_back({a.x + rng.uniform(-0.25, 0.25), a.y + rng.uniform(-0.25, 0.25)});
        detail::render({clutter}, 0.6 * hw, 0.6 * gain, H, W, img.data());
      }
    }
    const double amp = dj == 0 ? margin : margin + 0.12 * dj;
    T* out = ds.images.example(i).data();
    for (std::size_t k = 0; k < D; ++k) {
      const double v = std::clamp(img[k] + amp * rng.uniform(-1.0, 1.0), 0.0, 1.0);
      out[k] = static_cast<T>(std::round(v * 255)) / T{255};  // exact under IDX export
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batching and sampling

struct BatchPlan {
  std::vector<std::size_t> ordering;  // dataset positions, length n
  std::size_t batch_size = 1;

  std::size_t batches() const { return (ordering.size() + batch_size - 1) / batch_size; }
  std::span<const std::size_t> batch(std::size_t b) const {
    const std::size_t begin = b * batch_size;
    return std::span<const std::size_t>(ordering).subspan(begin, std::min(batch_size, ordering.size() - begin));
  }
};

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  rng.shuffle(idx.begin(), idx.end());
  return idx;
}

// n i.i.d. draws with P(i) = w[i] / sum(w), by inverse CDF over prefix sums.
inline std::vector<std::size_t> sample_with_replacement(std::size_t n, std::span<const double> weights, Rng& rng) {
  if (weights.size() != n) throw Error("sample_with_replacement: weights length differs from n");
  std::vector<double> cdf(n);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(weights[i] >= 0) || !std::isfinite(weights[i]))
      throw Error("sample_with_replacement: weights must be finite and nonnegative");
    total += weights[i];
    cdf[i] = total;
  }
  if (!(total > 0)) throw Error("sample_with_replacement: all weights are zero");
  std::vector<std::size_t> out(n);
  for (auto& o : out) {
    const double u = rng.uniform() * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) it = std::lower_bound(cdf.begin(), cdf.end(), total);  // u rounded up to total
    o = static_cast<std::size_t>(it - cdf.begin());
  }
  return out;
}

}  // namespace swaat
