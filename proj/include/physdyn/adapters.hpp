#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "physdyn/errors.hpp"
#include "physdyn/image.hpp"
#include "physdyn/synthetic_world.hpp"

namespace physdyn {

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Detections {
  FeatureMatrix features;   // n_boxes x feature_dim
  std::vector<Rect> boxes;  // n_boxes; padding rows have empty rects
};

// Frozen detector backbone seen through its cached outputs.
class BoxFeatureAdapter {
 public:
  virtual ~BoxFeatureAdapter() = default;
  virtual int n_boxes() const = 0;
  virtual int feature_dim() const = 0;
  virtual Detections detect(const Image& image) const = 0;
};

// Frozen text encoder; returns the pooled sentence representation.
class TextEmbeddingAdapter {
 public:
  virtual ~TextEmbeddingAdapter() = default;
  virtual int dim() const = 0;
  virtual std::vector<float> embed(std::string_view text) const = 0;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Uniform in [-1, 1], a pure function of (key, i).
inline float hash_unit(std::uint64_t key, std::uint64_t i) {
  const std::uint64_t h = splitmix64(key * 0x2545F4914F6CDD1DULL + i);
  return static_cast<float>((h >> 11) * (1.0 / 9007199254740992.0) * 2.0 - 1.0);
}

// Approximately standard normal, a pure function of (key, i).
inline float hash_normal(std::uint64_t key, std::uint64_t i) {
  const std::uint64_t a = splitmix64(key ^ (i * 0x9E3779B97F4A7C15ULL));
  const std::uint64_t b = splitmix64(a);
  const double u1 = ((a >> 11) + 1.0) * (1.0 / 9007199254740993.0);
  const double u2 = (b >> 11) * (1.0 / 9007199254740992.0);
  return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2));
}

inline std::uint32_t color_key(const std::uint8_t* p) { return (std::uint32_t{p[0]} << 16) | (std::uint32_t{p[1]} << 8) | p[2]; }

}  // namespace detail

// Deterministic stand-in for a detector backbone on rendered scenes. Boxes are
// the bounding rectangles of connected non-background regions; each box's
// feature vector holds its geometry, marker statistics and a hash of the
// region's outline colour (the rendered object identity).
class StubBoxDetector final : public BoxFeatureAdapter {
 public:
  static constexpr int kRbf = 16;
  static constexpr int kStripHash = 8;
  static constexpr int kIdentityOffset = 5 + 2 * kRbf + 6 + 1 + 1 + kStripHash;
  static constexpr int kMinFeatureDim = kIdentityOffset + 8;

  StubBoxDetector(int n_boxes, int feature_dim) : n_boxes_(n_boxes), feature_dim_(feature_dim) {
    if (n_boxes < 1) throw ValidationError("detector needs at least one box");
    if (feature_dim < kMinFeatureDim) {
      throw ValidationError("stub detector feature_dim must be at least " + std::to_string(kMinFeatureDim));
    }
  }

  int n_boxes() const override { return n_boxes_; }
  int feature_dim() const override { return feature_dim_; }

  Detections detect(const Image& image) const override {
    Detections out;
    out.features = FeatureMatrix::Zero(n_boxes_, feature_dim_);
    out.boxes.assign(static_cast<std::size_t>(n_boxes_), Rect{});
    auto regions = find_regions(image);
    std::sort(regions.begin(), regions.end(), [](const Rect& a, const Rect& b) {
      return a.x != b.x ? a.x < b.x : a.y < b.y;
    });
    const int n = std::min<int>(n_boxes_, static_cast<int>(regions.size()));
    for (int i = 0; i < n; ++i) {
      out.boxes[static_cast<std::size_t>(i)] = regions[static_cast<std::size_t>(i)];
      describe(image, regions[static_cast<std::size_t>(i)], out.features.row(i));
    }
    return out;
  }

 private:
  static std::vector<Rect> find_regions(const Image& img) {
    const int w = img.width, h = img.height;
    if (w == 0 || h == 0) return {};
    std::map<std::uint32_t, int> counts;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) ++counts[detail::color_key(img.pixel(x, y))];
    }
    const std::uint32_t background =
        std::max_element(counts.begin(), counts.end(), [](auto& a, auto& b) { return a.second < b.second; })->first;
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(w) * h, 0);
    std::vector<Rect> regions;
    std::vector<std::pair<int, int>> stack;
    for (int y0 = 0; y0 < h; ++y0) {
      for (int x0 = 0; x0 < w; ++x0) {
        const std::size_t i0 = static_cast<std::size_t>(y0) * w + x0;
        if (seen[i0] || detail::color_key(img.pixel(x0, y0)) == background) continue;
        int minx = x0, maxx = x0, miny = y0, maxy = y0, area = 0;
        stack.assign(1, {x0, y0});
        seen[i0] = 1;
        while (!stack.empty()) {
          auto [x, y] = stack.back();
          stack.pop_back();
          ++area;
          minx = std::min(minx, x), maxx = std::max(maxx, x);
          miny = std::min(miny, y), maxy = std::max(maxy, y);
          const int nx[4] = {x - 1, x + 1, x, x};
          const int ny[4] = {y, y, y - 1, y + 1};
          for (int k = 0; k < 4; ++k) {
            if (nx[k] < 0 || ny[k] < 0 || nx[k] >= w || ny[k] >= h) continue;
            const std::size_t j = static_cast<std::size_t>(ny[k]) * w + nx[k];
            if (seen[j] || detail::color_key(img.pixel(nx[k], ny[k])) == background) continue;
            seen[j] = 1;
            stack.push_back({nx[k], ny[k]});
          }
        }
        if (area >= 4) regions.push_back({minx, miny, maxx - minx + 1, maxy - miny + 1});
      }
    }
    return regions;
  }

  template <class Row>
  void describe(const Image& img, const Rect& box, Row f) const {
    const double W = img.width, H = img.height;
    const auto* outline = img.pixel(box.x, box.y);
    const auto* bottom_left = img.pixel(box.x, box.y + box.h - 1);
    const bool has_strip = detail::color_key(bottom_left) != detail::color_key(outline) && box.h > kStripHeight + 2;
    const Rect obj{box.x, box.y, box.w, box.h - (has_strip ? kStripHeight : 0)};

    auto rbf = [&](int offset, double v) {
      for (int k = 0; k < kRbf; ++k) {
        const double c = k / double(kRbf - 1);
        const double d = (v - c) * kRbf;
        f(offset + k) = static_cast<float>(std::exp(-0.5 * d * d));
      }
    };
    f(0) = 1.0f;
    f(1) = static_cast<float>((obj.x + obj.w / 2.0) / W);
    f(2) = static_cast<float>((obj.y + obj.h) / H);
    f(3) = static_cast<float>(obj.w / W);
    f(4) = static_cast<float>(obj.h / H);
    rbf(5, (obj.y + obj.h) / H);
    rbf(5 + kRbf, std::min(1.0, obj.h / (H / 4.0)));

    static constexpr Rgb kMarkers[6] = {kOpenColor, kLiquidColor, kToggleColor, kSliceColor, kDirtColor, kBrokenColor};
    int marker_counts[6] = {0, 0, 0, 0, 0, 0};
    double plain = 0, plain_n = 0;
    int interior = 0;
    for (int y = obj.y + 1; y < obj.y + obj.h - 1; ++y) {
      for (int x = obj.x + 1; x < obj.x + obj.w - 1; ++x) {
        const auto* p = img.pixel(x, y);
        ++interior;
        bool marker = false;
        for (int m = 0; m < 6; ++m) {
          if (p[0] == kMarkers[m].r && p[1] == kMarkers[m].g && p[2] == kMarkers[m].b) {
            ++marker_counts[m];
            marker = true;
          }
        }
        if (!marker) {
          plain += double(p[0]) + p[1] + p[2];
          plain_n += 1;
        }
      }
    }
    const int mo = 5 + 2 * kRbf;
    for (int m = 0; m < 6; ++m) {
      f(mo + m) = interior ? static_cast<float>(std::min(1.0, 4.0 * marker_counts[m] / interior)) : 0.0f;
    }
    const double outline_sum = double(outline[0]) + outline[1] + outline[2];
    f(mo + 6) = (plain_n > 0 && outline_sum > 0) ? static_cast<float>(plain / plain_n / outline_sum) : 0.0f;
    f(mo + 7) = has_strip ? 1.0f : 0.0f;
    if (has_strip) {
      const auto key = detail::color_key(bottom_left);
      for (int k = 0; k < kStripHash; ++k) f(mo + 8 + k) = detail::hash_unit(key, static_cast<std::uint64_t>(k));
    }
    const auto key = detail::color_key(outline);
    for (int k = kIdentityOffset; k < feature_dim_; ++k) {
      f(k) = detail::hash_unit(key, static_cast<std::uint64_t>(1000 + k));
    }
  }

  int n_boxes_;
  int feature_dim_;
};

// Bag of hashed unigram and bigram vectors. Identical sentences map to
// identical embeddings; different sentences almost surely differ.
class HashTextEncoder final : public TextEmbeddingAdapter {
 public:
  explicit HashTextEncoder(int dim, std::uint64_t seed = 0x5eed) : dim_(dim), seed_(seed) {
    if (dim < 1) throw ValidationError("text embedding dim must be positive");
  }

  int dim() const override { return dim_; }

  std::vector<float> embed(std::string_view text) const override {
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : text) {
      if (std::isalnum(static_cast<unsigned char>(c))) {
        cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      } else if (!cur.empty()) {
        tokens.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    std::vector<double> acc(static_cast<std::size_t>(dim_), 0.0);
    double weight = 0;
    auto add = [&](const std::string& tok, double scale) {
      const std::uint64_t key = detail::fnv1a(tok) ^ seed_;
      for (int i = 0; i < dim_; ++i) acc[static_cast<std::size_t>(i)] += scale * detail::hash_normal(key, static_cast<std::uint64_t>(i));
      weight += scale * scale;
    };
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      add(tokens[i], 1.0);
      if (i + 1 < tokens.size()) add(tokens[i] + " " + tokens[i + 1], 0.5);
    }
    std::vector<float> out(static_cast<std::size_t>(dim_), 0.0f);
    if (weight > 0) {
      const double norm = 1.0 / std::sqrt(weight);
      for (int i = 0; i < dim_; ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(acc[static_cast<std::size_t>(i)] * norm);
    }
    return out;
  }

 private:
  int dim_;
  std::uint64_t seed_;
};

}  // namespace physdyn
