#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "physdyn/adapters.hpp"
#include "physdyn/errors.hpp"
#include "physdyn/image.hpp"

namespace physdyn {

// On-disk layout (all integers and floats little-endian):
//   "PVFC" | u32 version | u32 record_count | u32 N | u32 D
//   record_count x { u16 idlen | idlen bytes UTF-8 id | N*D f32, row-major }
inline constexpr std::array<char, 4> kFeatureCacheMagic = {'P', 'V', 'F', 'C'};
inline constexpr std::uint32_t kFeatureCacheVersion = 1;
inline constexpr std::size_t kFeatureCacheHeaderBytes = 4 + 4 * 4;

struct BoxFeatureSet {
  FeatureMatrix features;
  std::string image_ref;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

inline void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  out.write(b, 2);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4] = {};
  in.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) | (std::uint32_t{b[3]} << 24);
}

inline std::uint16_t get_u16(std::istream& in) {
  unsigned char b[2] = {};
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline void put_f32(std::ostream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline float get_f32(std::istream& in) {
  const std::uint32_t bits = get_u32(in);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

// Single-writer streaming cache writer; the record count is patched on close().
class FeatureCacheWriter {
 public:
  FeatureCacheWriter(const std::string& path, std::uint32_t n, std::uint32_t d)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc), n_(n), d_(d) {
    if (!out_) throw IoError("cannot write " + path);
    out_.write(kFeatureCacheMagic.data(), 4);
    detail::put_u32(out_, kFeatureCacheVersion);
    detail::put_u32(out_, 0);
    detail::put_u32(out_, n_);
    detail::put_u32(out_, d_);
  }

  FeatureCacheWriter(const FeatureCacheWriter&) = delete;
  FeatureCacheWriter& operator=(const FeatureCacheWriter&) = delete;
  ~FeatureCacheWriter() {
    if (!closed_) {
      try {
        close();
      } catch (...) {
      }
    }
  }

  void add(const std::string& id, const FeatureMatrix& features) {
    if (features.rows() != static_cast<Eigen::Index>(n_) || features.cols() != static_cast<Eigen::Index>(d_)) {
      throw ValidationError("feature matrix for " + id + " is " + std::to_string(features.rows()) + "x" +
                            std::to_string(features.cols()) + ", cache expects " + std::to_string(n_) + "x" +
                            std::to_string(d_));
    }
    if (id.size() > 0xffff) throw ValidationError("cache id too long: " + id.substr(0, 32) + "...");
    detail::put_u16(out_, static_cast<std::uint16_t>(id.size()));
    out_.write(id.data(), static_cast<std::streamsize>(id.size()));
    for (Eigen::Index r = 0; r < features.rows(); ++r) {
      for (Eigen::Index c = 0; c < features.cols(); ++c) detail::put_f32(out_, features(r, c));
    }
    ++count_;
  }

  void close() {
    closed_ = true;
    out_.seekp(8);
    detail::put_u32(out_, count_);
    out_.close();
    if (!out_) throw IoError("write failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
  std::uint32_t n_, d_;
  std::uint32_t count_ = 0;
  bool closed_ = false;
};

// Random-access reader. Lookups are read-only and may be shared across threads
// only through separate instances (each owns its stream).
class FeatureCache {
 public:
  explicit FeatureCache(const std::string& path, std::optional<std::uint32_t> expect_n = std::nullopt,
                        std::optional<std::uint32_t> expect_d = std::nullopt)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open " + path);
    std::array<char, 4> magic{};
    in_.read(magic.data(), 4);
    if (!in_ || magic != kFeatureCacheMagic) throw ValidationError(path + ": not a feature cache");
    const auto version = detail::get_u32(in_);
    if (version != kFeatureCacheVersion) {
      throw ValidationError(path + ": cache version " + std::to_string(version) + " unsupported");
    }
    count_ = detail::get_u32(in_);
    n_ = detail::get_u32(in_);
    d_ = detail::get_u32(in_);
    if (expect_n && *expect_n != n_) {
      throw ValidationError(path + ": cache has N=" + std::to_string(n_) + ", expected " + std::to_string(*expect_n));
    }
    if (expect_d && *expect_d != d_) {
      throw ValidationError(path + ": cache has D=" + std::to_string(d_) + ", expected " + std::to_string(*expect_d));
    }
    const std::streamoff payload = static_cast<std::streamoff>(n_) * d_ * 4;
    for (std::uint32_t i = 0; i < count_; ++i) {
      const auto len = detail::get_u16(in_);
      std::string id(len, '\0');
      in_.read(id.data(), len);
      if (!in_) throw ValidationError(path + ": truncated cache");
      order_.push_back(id);
      index_[id] = in_.tellg();
      in_.seekg(payload, std::ios::cur);
    }
    if (!in_ || static_cast<std::uintmax_t>(in_.tellg()) > std::filesystem::file_size(path)) {
      throw ValidationError(path + ": truncated cache");
    }
  }

  std::uint32_t n() const { return n_; }
  std::uint32_t d() const { return d_; }
  std::uint32_t size() const { return count_; }
  const std::vector<std::string>& ids() const { return order_; }
  bool contains(const std::string& id) const { return index_.count(id) > 0; }

  BoxFeatureSet read(const std::string& image_ref) {
    auto it = index_.find(image_ref);
    if (it == index_.end()) throw ValidationError(path_ + ": unknown image_ref " + image_ref);
    in_.clear();
    in_.seekg(it->second);
    BoxFeatureSet out{FeatureMatrix(n_, d_), image_ref};
    for (std::uint32_t r = 0; r < n_; ++r) {
      for (std::uint32_t c = 0; c < d_; ++c) out.features(r, c) = detail::get_f32(in_);
    }
    if (!in_) throw ValidationError(path_ + ": truncated record " + image_ref);
    return out;
  }

  std::unordered_map<std::string, FeatureMatrix> read_all() {
    std::unordered_map<std::string, FeatureMatrix> out;
    for (const auto& id : order_) out.emplace(id, read(id).features);
    return out;
  }

 private:
  std::string path_;
  std::ifstream in_;
  std::uint32_t count_ = 0, n_ = 0, d_ = 0;
  std::vector<std::string> order_;
  std::unordered_map<std::string, std::streamoff> index_;
};

using ImageLoader = std::function<Image(const std::string& image_ref)>;

// Runs the adapter over every referenced image and stores the detections.
inline void write_feature_cache(const std::string& path, const std::vector<std::string>& image_refs,
                                const ImageLoader& load, const BoxFeatureAdapter& adapter) {
  FeatureCacheWriter writer(path, static_cast<std::uint32_t>(adapter.n_boxes()),
                            static_cast<std::uint32_t>(adapter.feature_dim()));
  for (const auto& ref : image_refs) writer.add(ref, adapter.detect(load(ref)).features);
  writer.close();
}

// Text embeddings share the container: N = 1, D = adapter dim, id = the text.
inline void write_text_cache(const std::string& path, const std::vector<std::string>& texts,
                             const TextEmbeddingAdapter& adapter) {
  FeatureCacheWriter writer(path, 1, static_cast<std::uint32_t>(adapter.dim()));
  for (const auto& t : texts) {
    const auto v = adapter.embed(t);
    writer.add(t, Eigen::Map<const FeatureMatrix>(v.data(), 1, static_cast<Eigen::Index>(v.size())));
  }
  writer.close();
}

// In-memory view of the box and text caches a model reads its inputs from.
class FeatureStore {
 public:
  int n_boxes() const { return n_boxes_; }
  int box_dim() const { return box_dim_; }
  int text_dim() const { return text_dim_; }
  bool has_boxes() const { return !boxes_.empty(); }
  bool has_text() const { return !text_.empty(); }

  void add_boxes(const std::string& image_ref, FeatureMatrix features) {
    if (boxes_.empty()) {
      n_boxes_ = static_cast<int>(features.rows());
      box_dim_ = static_cast<int>(features.cols());
    } else if (features.rows() != n_boxes_ || features.cols() != box_dim_) {
      throw ValidationError("box features for " + image_ref + " have inconsistent shape");
    }
    boxes_[image_ref] = std::move(features);
  }

  void add_text(const std::string& text, std::vector<float> embedding) {
    if (text_.empty()) {
      text_dim_ = static_cast<int>(embedding.size());
    } else if (static_cast<int>(embedding.size()) != text_dim_) {
      throw ValidationError("text embedding for '" + text + "' has inconsistent dimension");
    }
    text_[text] = std::move(embedding);
  }

  const FeatureMatrix& boxes(const std::string& image_ref) const {
    auto it = boxes_.find(image_ref);
    if (it == boxes_.end()) throw ValidationError("no cached box features for image " + image_ref);
    return it->second;
  }

  const std::vector<float>& text(const std::string& text) const {
    auto it = text_.find(text);
    if (it == text_.end()) throw ValidationError("no cached text embedding for '" + text + "'");
    return it->second;
  }

  bool contains_text(const std::string& text) const { return text_.count(text) > 0; }

  void load_box_cache(const std::string& path) {
    FeatureCache cache(path);
    for (auto& [id, m] : cache.read_all()) add_boxes(id, std::move(m));
  }

  void load_text_cache(const std::string& path) {
    FeatureCache cache(path, 1u);
    for (auto& [id, m] : cache.read_all()) add_text(id, std::vector<float>(m.data(), m.data() + m.size()));
  }

 private:
  int n_boxes_ = 0, box_dim_ = 0, text_dim_ = 0;
  std::unordered_map<std::string, FeatureMatrix> boxes_;
  std::unordered_map<std::string, std::vector<float>> text_;
};

}  // namespace physdyn
