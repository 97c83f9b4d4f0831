#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "physdyn/errors.hpp"
#include "physdyn/image.hpp"
#include "physdyn/schema.hpp"

namespace physdyn {

struct FilterThresholds {
  // Reject when the number of changed (x, y, channel) positions exceeds this.
  std::int64_t max_changed_pixels = 400'000;
  // Keep only when the largest normalized channel change is strictly above this.
  double min_max_change = 0.2;

  // Reference raster the default count was chosen for.
  static constexpr std::int64_t kReferencePositions = 640LL * 385 * 3;

  // Same fraction of changed positions, for a different raster size.
  static FilterThresholds scaled_to(int width, int height) {
    FilterThresholds t;
    const std::int64_t positions = static_cast<std::int64_t>(width) * height * 3;
    t.max_changed_pixels = static_cast<std::int64_t>(
        std::llround(static_cast<double>(t.max_changed_pixels) * positions / kReferencePositions));
    return t;
  }

  void validate(int width, int height) const {
    if (!(min_max_change >= 0.0 && min_max_change <= 1.0)) {
      throw ValidationError("min_max_change must lie in [0, 1]");
    }
    const std::int64_t positions = static_cast<std::int64_t>(width) * height * 3;
    if (max_changed_pixels < 0 || max_changed_pixels > positions) {
      throw ValidationError("max_changed_pixels must lie in [0, " + std::to_string(positions) + "]");
    }
  }
};

inline void check_same_dimensions(const ImagePair& pair) {
  if (pair.pre.width != pair.post.width || pair.pre.height != pair.post.height) {
    throw ValidationError("image pair dimensions differ: " + std::to_string(pair.pre.width) + "x" +
                          std::to_string(pair.pre.height) + " vs " + std::to_string(pair.post.width) + "x" +
                          std::to_string(pair.post.height));
  }
}

// Number of (x, y, channel) positions whose 8-bit values differ.
inline std::int64_t count_changed_pixels(const ImagePair& pair) {
  check_same_dimensions(pair);
  std::int64_t n = 0;
  const auto& a = pair.pre.rgb;
  const auto& b = pair.post.rgb;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n;
}

// max |pre - post| / 255 over all positions and channels.
inline double max_pixel_change(const ImagePair& pair) {
  check_same_dimensions(pair);
  int best = 0;
  const auto& a = pair.pre.rgb;
  const auto& b = pair.post.rgb;
  for (std::size_t i = 0; i < a.size(); ++i) best = std::max(best, std::abs(int{a[i]} - int{b[i]}));
  return best / 255.0;
}

inline constexpr std::string_view kReasonViewpoint = "viewpoint change";
inline constexpr std::string_view kReasonNoSalient = "no salient change";
inline constexpr std::string_view kReasonAssetMissing = "asset missing";

struct PairStatistics {
  std::string id;
  std::int64_t changed = 0;
  std::int64_t positions = 0;
  double max_change = 0.0;
  std::vector<std::string> reasons;
};

struct FilterReport {
  std::size_t total = 0;
  std::size_t kept = 0;
  std::size_t rejected = 0;
  std::size_t viewpoint_change = 0;
  std::size_t no_salient_change = 0;
  std::size_t both = 0;
  std::size_t asset_missing = 0;
  FilterThresholds thresholds;
  std::vector<PairStatistics> pairs;

  static constexpr int kBins = 20;

  // Histograms of changed-position fraction and max change, both over [0, 1].
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> histograms() const {
    std::vector<std::size_t> changed(kBins, 0), maxc(kBins, 0);
    auto bin = [](double v) { return std::clamp(static_cast<int>(v * kBins), 0, kBins - 1); };
    for (const auto& p : pairs) {
      if (p.positions == 0) continue;
      ++changed[static_cast<std::size_t>(bin(static_cast<double>(p.changed) / p.positions))];
      ++maxc[static_cast<std::size_t>(bin(p.max_change))];
    }
    return {changed, maxc};
  }

  json to_json() const {
    auto [changed_hist, max_hist] = histograms();
    json per = json::array();
    for (const auto& p : pairs) {
      per.push_back({{"id", p.id}, {"changed", p.changed}, {"max_change", p.max_change}, {"reasons", p.reasons}});
    }
    return {{"thresholds", {{"max_changed_pixels", thresholds.max_changed_pixels},
                            {"min_max_change", thresholds.min_max_change}}},
            {"total", total},
            {"kept", kept},
            {"rejected", rejected},
            {"rejected_by_reason", {{std::string(kReasonViewpoint), viewpoint_change},
                                    {std::string(kReasonNoSalient), no_salient_change},
                                    {std::string(kReasonAssetMissing), asset_missing}}},
            {"rejected_by_both_pixel_criteria", both},
            {"histogram_changed_fraction", changed_hist},
            {"histogram_max_change", max_hist},
            {"pairs", per}};
  }
};

// Returns the pair for a record, or nullopt when its assets cannot be loaded.
using AssetLoader = std::function<std::optional<ImagePair>(const TrajectoryRecord&)>;

struct FilterResult {
  std::vector<TrajectoryRecord> kept;
  FilterReport report;
};

inline bool keep_pair(std::int64_t changed, double max_change, const FilterThresholds& t) {
  return changed <= t.max_changed_pixels && max_change > t.min_max_change;
}

inline FilterResult apply_visual_filters(const std::vector<TrajectoryRecord>& records, const AssetLoader& assets,
                                         const FilterThresholds& thresholds) {
  FilterResult result;
  auto& rep = result.report;
  rep.thresholds = thresholds;
  rep.total = records.size();
  for (const auto& r : records) {
    PairStatistics stats;
    stats.id = r.id;
    std::optional<ImagePair> pair;
    try {
      pair = assets(r);
    } catch (const IoError&) {
      pair.reset();
    }
    if (!pair) {
      stats.reasons.emplace_back(kReasonAssetMissing);
      ++rep.asset_missing;
      ++rep.rejected;
      rep.pairs.push_back(std::move(stats));
      continue;
    }
    stats.changed = count_changed_pixels(*pair);
    stats.max_change = max_pixel_change(*pair);
    stats.positions = static_cast<std::int64_t>(pair->pre.rgb.size());
    const bool too_many = stats.changed > thresholds.max_changed_pixels;
    const bool too_small = !(stats.max_change > thresholds.min_max_change);
    if (too_many) {
      stats.reasons.emplace_back(kReasonViewpoint);
      ++rep.viewpoint_change;
    }
    if (too_small) {
      stats.reasons.emplace_back(kReasonNoSalient);
      ++rep.no_salient_change;
    }
    if (too_many && too_small) ++rep.both;
    if (too_many || too_small) {
      ++rep.rejected;
    } else {
      ++rep.kept;
      result.kept.push_back(r);
    }
    rep.pairs.push_back(std::move(stats));
  }
  return result;
}

}  // namespace physdyn
