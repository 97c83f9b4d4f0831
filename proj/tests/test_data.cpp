#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "physdyn/adapters.hpp"
#include "physdyn/feature_cache.hpp"
#include "physdyn/pipeline.hpp"
#include "physdyn/pixel_stats.hpp"
#include "physdyn/split.hpp"
#include "physdyn/synthetic_world.hpp"
#include "test_support.hpp"

namespace physdyn {
namespace {

using testing::TempDir;
using testing::tiny_schema;

// --- schema ------------------------------------------------------------------

TEST(Schema, GlobalIndexIsContiguousAndOrdered) {
  auto s = tiny_schema(5, 3);
  EXPECT_EQ(s.size(), kNumAttributes);
  EXPECT_EQ(s.total_values(), 5u + 5u + 36u * 3u);
  std::size_t expect = 0;
  for (std::size_t a = 0; a < s.size(); ++a) {
    for (std::size_t v = 0; v < s.vocabulary_size(a); ++v) EXPECT_EQ(s.global_index(a, v), expect++);
  }
  const auto ranges = s.ranges();
  ASSERT_EQ(ranges.size(), kNumAttributes);
  EXPECT_EQ(ranges[2].offset, 10u);
  EXPECT_EQ(ranges[2].size, 3u);
}

TEST(Schema, RejectsMalformedVocabularies) {
  std::vector<std::pair<std::string, std::vector<std::string>>> v;
  for (auto n : kAttributeNames) v.emplace_back(std::string(n), std::vector<std::string>{"a", "b"});
  EXPECT_NO_THROW(AttributeSchema::from_vocabularies(v));

  auto short_list = v;
  short_list.pop_back();
  EXPECT_THROW(AttributeSchema::from_vocabularies(short_list), ValidationError);

  auto renamed = v;
  renamed[3].first = "Distances";
  EXPECT_THROW(AttributeSchema::from_vocabularies(renamed), ValidationError);

  auto empty = v;
  empty[5].second.clear();
  EXPECT_THROW(AttributeSchema::from_vocabularies(empty), ValidationError);

  auto dup = v;
  dup[7].second = {"x", "x"};
  EXPECT_THROW(AttributeSchema::from_vocabularies(dup), ValidationError);
}

TEST(Schema, JsonRoundTrip) {
  auto s = make_synthetic_schema(20);
  auto back = AttributeSchema::from_json(s.to_json());
  EXPECT_TRUE(back == s);
  auto j = s.to_json();
  j["schema_version"] = 99;
  EXPECT_THROW(AttributeSchema::from_json(j), ValidationError);
}

TEST(Schema, RecordsRoundTripThroughJsonl) {
  TempDir dir;
  auto s = tiny_schema();
  std::mt19937_64 rng(4);
  auto records = testing::random_records(rng, s, 25);
  records[3].objects_pre[1].is_none = true;
  records[3].objects_post[1].is_none = true;
  records[4].action.text.reset();
  records[5].split_tags = {SplitTag::kTest, SplitTag::kZeroShot};
  write_records(dir.file("r.jsonl"), records);
  EXPECT_EQ(read_records(dir.file("r.jsonl")), records);
}

TEST(Schema, ReadRecordsReportsMissingFile) {
  EXPECT_THROW(read_records("/nonexistent/records.jsonl"), IoError);
}

TEST(Schema, ValidateTrajectoryFindsEachViolation) {
  auto s = tiny_schema(4, 2);
  std::mt19937_64 rng(1);
  auto r = testing::random_record(rng, s, "x");
  EXPECT_TRUE(validate_trajectory(r, s).ok());

  auto bad = r;
  bad.objects_post[0].values[attr::kIsOpen] = 2;
  EXPECT_EQ(validate_trajectory(bad, s).violations.size(), 1u);

  bad = r;
  bad.objects_pre[1].values.pop_back();
  EXPECT_FALSE(validate_trajectory(bad, s).ok());

  bad = r;
  bad.objects_pre[0].is_none = true;
  EXPECT_FALSE(validate_trajectory(bad, s).ok());

  bad = r;
  bad.action.action_id = 10;
  bad.action.object_name = 4;
  bad.action.receptacle_name = -1;
  EXPECT_EQ(validate_trajectory(bad, s).violations.size(), 3u);
}

TEST(Schema, ActionNamesAndAliases) {
  for (std::size_t i = 0; i < kNumActions; ++i) EXPECT_EQ(parse_action(kActionNames[i]), static_cast<int>(i));
  EXPECT_EQ(parse_action("PickupObject"), 5);
  EXPECT_EQ(parse_action("ToggleObjectOff"), 8);
  EXPECT_FALSE(parse_action("Throw").has_value());
  EXPECT_EQ(action_name(42), "Unknown");
  EXPECT_EQ(label_text("CounterTop"), "counter top");
  EXPECT_EQ(label_text("Sink_Basin"), "sink basin");
  EXPECT_EQ(label_text("TV"), "tv");
}

// --- image and pixel statistics ------------------------------------------------

// Pair whose post image differs from pre in exactly `changed` positions, the
// first of which moves by `delta`, the rest by one level.
ImagePair crafted_pair(int w, int h, std::int64_t changed, int delta) {
  ImagePair p{Image(w, h), Image(w, h)};
  std::fill(p.pre.rgb.begin(), p.pre.rgb.end(), std::uint8_t{100});
  p.post = p.pre;
  for (std::int64_t i = 0; i < changed; ++i) {
    p.post.rgb[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(100 + (i == 0 ? delta : 1));
  }
  return p;
}

std::vector<TrajectoryRecord> ids(std::initializer_list<std::string> names) {
  std::vector<TrajectoryRecord> out;
  for (const auto& n : names) {
    TrajectoryRecord r;
    r.id = n;
    out.push_back(r);
  }
  return out;
}

TEST(PixelStats, CountsAndMaxChangeMatchDefinition) {
  auto p = crafted_pair(10, 7, 17, 51);
  EXPECT_EQ(count_changed_pixels(p), 17);
  EXPECT_DOUBLE_EQ(max_pixel_change(p), 51.0 / 255.0);
  ImagePair odd{Image(3, 3), Image(3, 4)};
  EXPECT_THROW(count_changed_pixels(odd), ValidationError);
}

TEST(PixelStats, ThresholdBoundariesAtReferenceSize) {
  const FilterThresholds t;
  EXPECT_EQ(t.max_changed_pixels, 400000);
  EXPECT_DOUBLE_EQ(t.min_max_change, 0.2);
  EXPECT_TRUE(keep_pair(400000, 0.5, t));
  EXPECT_FALSE(keep_pair(400001, 0.5, t));
  EXPECT_FALSE(keep_pair(100, 0.2, t));
  EXPECT_TRUE(keep_pair(100, std::nextafter(0.2, 1.0), t));

  // Full-size rasters: 400000 changes are kept, 400001 are rejected.
  const auto at_limit = crafted_pair(640, 385, 400000, 60);
  const auto over = crafted_pair(640, 385, 400001, 60);
  const auto records = ids({"a", "b"});
  auto result = apply_visual_filters(
      records, [&](const TrajectoryRecord& r) -> std::optional<ImagePair> { return r.id == "a" ? at_limit : over; }, t);
  ASSERT_EQ(result.kept.size(), 1u);
  EXPECT_EQ(result.kept[0].id, "a");
  EXPECT_EQ(result.report.viewpoint_change, 1u);
}

TEST(PixelStats, SalientChangeBoundary) {
  const FilterThresholds t;
  // 51/255 is exactly 0.2 and must be rejected; 52/255 is kept.
  const auto equal = crafted_pair(20, 20, 5, 51);
  const auto above = crafted_pair(20, 20, 5, 52);
  const auto records = ids({"eq", "gt", "gone"});
  auto result = apply_visual_filters(
      records,
      [&](const TrajectoryRecord& r) -> std::optional<ImagePair> {
        if (r.id == "gone") return std::nullopt;
        return r.id == "eq" ? equal : above;
      },
      t);
  ASSERT_EQ(result.kept.size(), 1u);
  EXPECT_EQ(result.kept[0].id, "gt");
  const auto& rep = result.report;
  EXPECT_EQ(rep.total, 3u);
  EXPECT_EQ(rep.kept, 1u);
  EXPECT_EQ(rep.rejected, 2u);
  EXPECT_EQ(rep.no_salient_change, 1u);
  EXPECT_EQ(rep.asset_missing, 1u);
  ASSERT_EQ(rep.pairs.size(), 3u);
  EXPECT_EQ(rep.pairs[2].reasons, std::vector<std::string>{std::string(kReasonAssetMissing)});
}

TEST(PixelStats, BothReasonsAreCounted) {
  FilterThresholds t;
  t.max_changed_pixels = 3;
  const auto p = crafted_pair(4, 4, 10, 1);
  const auto records = ids({"x"});
  auto result = apply_visual_filters(records, [&](const TrajectoryRecord&) -> std::optional<ImagePair> { return p; }, t);
  EXPECT_EQ(result.report.both, 1u);
  EXPECT_EQ(result.report.pairs[0].reasons.size(), 2u);
}

TEST(PixelStats, ScaledThresholdsPreserveFraction) {
  const auto t = FilterThresholds::scaled_to(640, 385);
  EXPECT_EQ(t.max_changed_pixels, 400000);
  const auto small = FilterThresholds::scaled_to(128, 96);
  EXPECT_EQ(small.max_changed_pixels, std::llround(400000.0 * 128 * 96 / (640.0 * 385)));
  EXPECT_THROW(small.validate(1, 1), ValidationError);
  FilterThresholds bad;
  bad.min_max_change = 1.5;
  EXPECT_THROW(bad.validate(640, 385), ValidationError);
}

TEST(Image, PngRoundTrip) {
  TempDir dir;
  Image img(13, 9);
  std::mt19937 rng(2);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng());
  write_png(dir.file("a.png"), img);
  const auto back = read_png(dir.file("a.png"));
  EXPECT_EQ(back.width, 13);
  EXPECT_EQ(back.height, 9);
  EXPECT_EQ(back.rgb, img.rgb);
  EXPECT_THROW(read_png(dir.file("missing.png")), IoError);
}

// --- synthetic world ------------------------------------------------------------

TEST(SyntheticWorld, SameSeedSameWorld) {
  SyntheticWorldConfig c;
  c.n_trajectories = 60;
  c.with_text = true;
  auto a = generate_synthetic_world(c, 11);
  auto b = generate_synthetic_world(c, 11);
  auto other = generate_synthetic_world(c, 12);
  EXPECT_EQ(a.records, b.records);
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    EXPECT_EQ(a.images[i].pre.rgb, b.images[i].pre.rgb);
    EXPECT_EQ(a.images[i].post.rgb, b.images[i].post.rgb);
  }
  EXPECT_NE(a.records, other.records);
}

TEST(SyntheticWorld, RecordsAreValidAndFollowTheRules) {
  SyntheticWorldConfig c;
  c.n_trajectories = 300;
  auto w = generate_synthetic_world(c, 5);
  ASSERT_EQ(w.records.size(), 300u);
  ASSERT_EQ(w.images.size(), 300u);
  ASSERT_EQ(w.layouts.size(), 300u);
  std::set<int> actions_seen;
  for (const auto& r : w.records) {
    EXPECT_TRUE(validate_trajectory(r, w.schema).ok()) << r.id;
    auto [t, o] = apply_rules(w.schema, r.action.action_id, r.objects_pre[0], r.objects_pre[1]);
    EXPECT_EQ(t, r.objects_post[0]) << r.id;
    EXPECT_EQ(o, r.objects_post[1]) << r.id;
    EXPECT_EQ(r.action.object_name, r.objects_pre[0].values[attr::kObjectName]);
    actions_seen.insert(r.action.action_id);
  }
  EXPECT_EQ(actions_seen.size(), kNumActions);
}

TEST(SyntheticWorld, SliceRuleShrinksAndMarks) {
  auto s = make_synthetic_schema(20);
  ObjectState t;
  t.values.assign(kNumAttributes, 0);
  t.values[attr::kSliceable] = kYes;
  t.values[attr::kSize] = 3;
  ObjectState o = t;
  auto [after, other] = apply_rules(s, static_cast<int>(Action::kSlice), t, o);
  EXPECT_EQ(after.values[attr::kIsSliced], kYes);
  EXPECT_EQ(after.values[attr::kSize], 2);
  EXPECT_EQ(other, o);
  auto [again, unused] = apply_rules(s, static_cast<int>(Action::kSlice), after, o);
  EXPECT_EQ(again, after);
  t.values[attr::kSliceable] = kNo;
  auto [guarded, unused2] = apply_rules(s, static_cast<int>(Action::kSlice), t, o);
  EXPECT_EQ(guarded, t);
}

TEST(SyntheticWorld, DetectorRecoversRenderedObjects) {
  SyntheticWorldConfig c;
  c.n_trajectories = 40;
  c.viewpoint_change_rate = 0.0;
  auto w = generate_synthetic_world(c, 9);
  StubBoxDetector det(8, 64);
  for (std::size_t i = 0; i < w.records.size(); ++i) {
    const auto d = det.detect(w.images[i].pre);
    for (const auto& e : w.layouts[i].entries) {
      bool found = false;
      for (const auto& b : d.boxes) {
        found |= b.x == e.rect_pre.x && b.y == e.rect_pre.y && b.w == e.rect_pre.w && b.h >= e.rect_pre.h;
      }
      EXPECT_TRUE(found) << w.records[i].id;
    }
  }
}

TEST(SyntheticWorld, ConfigValidation) {
  SyntheticWorldConfig c;
  c.n_objects = 1;
  EXPECT_THROW(generate_synthetic_world(c, 1), ValidationError);
  c = {};
  c.image_width = 40;
  EXPECT_THROW(generate_synthetic_world(c, 1), ValidationError);
  c = {};
  c.viewpoint_change_rate = 2;
  EXPECT_THROW(generate_synthetic_world(c, 1), ValidationError);
}

// --- split ---------------------------------------------------------------------

struct SplitCase {
  std::vector<TrajectoryRecord> records;
  std::vector<std::string> objects;
  std::vector<ExcludedPair> pairs;
};

// Random records over a synthetic schema with random exclusion lists.
SplitCase random_split_case(std::uint64_t seed, const AttributeSchema& schema) {
  std::mt19937_64 rng(seed);
  SplitCase c;
  SyntheticWorldConfig wc;
  wc.n_trajectories = 80 + rng() % 80;
  c.records = generate_synthetic_world(wc, seed).records;
  const auto n_names = schema.vocabulary_size(attr::kObjectName);
  std::uniform_int_distribution<std::size_t> name(1, n_names - 1);
  for (std::size_t k = rng() % 3; k > 0; --k) c.objects.push_back(schema.object_name(name(rng)));
  for (std::size_t k = rng() % 4; k > 0; --k) {
    c.pairs.push_back({std::string(kActionNames[rng() % kNumActions]), schema.object_name(name(rng))});
  }
  return c;
}

TEST(Split, PropertyNoExcludedContentOutsideTest) {
  const auto schema = make_synthetic_schema(20);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto c = random_split_case(seed, schema);
    ExclusionIndex index(schema, c.objects, c.pairs);
    std::size_t clean = 0;
    for (const auto& r : c.records) clean += !index.mentions(r);
    SplitSizes sz{clean / 2, clean / 4, clean - clean / 2 - clean / 4};
    auto m = build_zero_shot_split(c.records, schema, c.objects, c.pairs, sz, seed);
    EXPECT_TRUE(audit_manifest(m, c.records, schema).empty()) << "seed " << seed;
    EXPECT_EQ(m.train_ids.size(), sz.train);
    EXPECT_EQ(m.val_ids.size(), sz.val);
    EXPECT_EQ(m.test_ids.size(), sz.test + m.zero_shot_test_ids.size());
    EXPECT_EQ(m.zero_shot_test_ids.size(), c.records.size() - clean);
    for (const auto& id : m.train_ids) {
      auto rs = select_records(c.records, {id});
      EXPECT_FALSE(index.mentions(rs[0]));
    }
  }
}

TEST(Split, DeterministicPerSeedAndJsonRoundTrip) {
  const auto schema = make_synthetic_schema(20);
  auto c = random_split_case(3, schema);
  SplitSizes sz{20, 10, 10};
  auto a = build_zero_shot_split(c.records, schema, c.objects, c.pairs, sz, 7);
  auto b = build_zero_shot_split(c.records, schema, c.objects, c.pairs, sz, 7);
  auto d = build_zero_shot_split(c.records, schema, c.objects, c.pairs, sz, 8);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_NE(a.train_ids, d.train_ids);
  EXPECT_EQ(SplitManifest::from_json(a.to_json()).to_json(), a.to_json());
}

TEST(Split, AuditCatchesLeaks) {
  const auto schema = make_synthetic_schema(20);
  SyntheticWorldConfig wc;
  wc.n_trajectories = 100;
  auto records = generate_synthetic_world(wc, 2).records;
  const std::string victim = schema.object_name(static_cast<std::size_t>(records[0].action.object_name));
  auto m = build_zero_shot_split(records, schema, {victim}, {}, {10, 5, 5}, 1);
  ASSERT_FALSE(m.zero_shot_test_ids.empty());
  auto leaked = m;
  leaked.train_ids.push_back(m.zero_shot_test_ids[0]);
  EXPECT_FALSE(audit_manifest(leaked, records, schema).empty());
  auto overlap = m;
  overlap.val_ids.push_back(m.train_ids[0]);
  EXPECT_FALSE(audit_manifest(overlap, records, schema).empty());
}

TEST(Split, ErrorsOnBadInput) {
  const auto schema = make_synthetic_schema(20);
  SyntheticWorldConfig wc;
  wc.n_trajectories = 30;
  auto records = generate_synthetic_world(wc, 2).records;
  EXPECT_THROW(build_zero_shot_split(records, schema, {"Unicorn"}, {}, {1, 1, 1}, 0), ValidationError);
  EXPECT_THROW(build_zero_shot_split(records, schema, {}, {{"Juggle", "Pot"}}, {1, 1, 1}, 0), ValidationError);
  EXPECT_THROW(build_zero_shot_split(records, schema, {}, {}, {20, 10, 1}, 0), ValidationError);
  auto dup = records;
  dup.push_back(records[0]);
  EXPECT_THROW(build_zero_shot_split(dup, schema, {}, {}, {1, 1, 1}, 0), ValidationError);
}

TEST(Split, ExclusionFilesIgnoreCommentsAndBlanks) {
  TempDir dir;
  {
    std::ofstream o(dir.file("objects.txt"));
    o << "# header\nTowel\n\n  SoapBar  \n";
    std::ofstream p(dir.file("pairs.txt"));
    p << "# action,object\nPickupObject, CellPhone\nPutObject,Pot\n";
  }
  EXPECT_EQ(read_excluded_objects(dir.file("objects.txt")), (std::vector<std::string>{"Towel", "SoapBar"}));
  const std::vector<ExcludedPair> expect{{"PickupObject", "CellPhone"}, {"PutObject", "Pot"}};
  EXPECT_EQ(read_excluded_pairs(dir.file("pairs.txt")), expect);
  EXPECT_THROW(read_excluded_objects(dir.file("none.txt")), IoError);
}

TEST(Split, ShippedExclusionListsParse) {
  const std::string data = std::string(PHYSDYN_SOURCE_DIR) + "/data/";
  const auto objects = read_excluded_objects(data + "full_excluded_objects.txt");
  const auto pairs = read_excluded_pairs(data + "full_excluded_pairs.txt");
  EXPECT_EQ(objects.size(), 14u);
  EXPECT_EQ(pairs.size(), 27u);
  for (const auto& p : pairs) EXPECT_TRUE(parse_action(p.action).has_value()) << p.action;

  const auto desk = Profile::desk();
  EXPECT_EQ(read_excluded_objects(data + "desk_excluded_objects.txt"), desk.excluded_objects);
  EXPECT_EQ(read_excluded_pairs(data + "desk_excluded_pairs.txt"), desk.excluded_pairs);
}

// --- adapters and caches ---------------------------------------------------------

TEST(Adapters, HashTextEncoderIsDeterministicAndNormalized) {
  HashTextEncoder enc(32);
  const auto a = enc.embed("the robot opens the fridge");
  EXPECT_EQ(a, enc.embed("The robot opens the FRIDGE!"));
  EXPECT_NE(a, enc.embed("the robot closes the fridge"));
  double norm = 0;
  for (float v : a) norm += double(v) * v;
  EXPECT_GT(norm, 0.1);
  EXPECT_EQ(enc.embed("").size(), 32u);
  EXPECT_THROW(HashTextEncoder(0), ValidationError);
}

TEST(Adapters, StubDetectorShapeAndPadding) {
  StubBoxDetector det(5, 64);
  Image blank(64, 48);
  std::fill(blank.rgb.begin(), blank.rgb.end(), std::uint8_t{200});
  const auto none = det.detect(blank);
  EXPECT_EQ(none.features.rows(), 5);
  EXPECT_EQ(none.features.cols(), 64);
  EXPECT_EQ(none.features.cwiseAbs().sum(), 0.0f);
  fill_rect(blank, {10, 10, 8, 8}, {30, 200, 90});
  const auto one = det.detect(blank);
  EXPECT_EQ(one.boxes[0].x, 10);
  EXPECT_EQ(one.boxes[0].w, 8);
  EXPECT_FLOAT_EQ(one.features(0, 0), 1.0f);
  EXPECT_EQ(one.features.row(1).cwiseAbs().sum(), 0.0f);
}

TEST(FeatureCache, RoundTripAndRandomAccess) {
  TempDir dir;
  std::mt19937 rng(3);
  std::normal_distribution<float> n;
  std::vector<std::pair<std::string, FeatureMatrix>> items;
  {
    FeatureCacheWriter w(dir.file("c.bin"), 3, 4);
    for (int i = 0; i < 6; ++i) {
      FeatureMatrix m(3, 4);
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = n(rng);
      items.emplace_back("img" + std::to_string(i), m);
      w.add(items.back().first, m);
    }
    EXPECT_THROW(w.add("bad", FeatureMatrix(2, 4)), ValidationError);
    w.close();
  }
  FeatureCache c(dir.file("c.bin"), 3u, 4u);
  EXPECT_EQ(c.size(), 6u);
  for (int i = 5; i >= 0; --i) EXPECT_EQ(c.read(items[i].first).features, items[i].second);
  EXPECT_THROW(c.read("missing"), ValidationError);
  EXPECT_THROW(FeatureCache(dir.file("c.bin"), 4u), ValidationError);
  EXPECT_THROW(FeatureCache(dir.file("c.bin"), std::nullopt, 5u), ValidationError);
  EXPECT_THROW(FeatureCache(dir.file("nope.bin")), IoError);
}

TEST(FeatureCache, RejectsForeignAndTruncatedFiles) {
  TempDir dir;
  {
    std::ofstream o(dir.file("junk.bin"), std::ios::binary);
    o << "JUNKJUNKJUNKJUNKJUNK";
  }
  EXPECT_THROW(FeatureCache(dir.file("junk.bin")), ValidationError);
  {
    FeatureCacheWriter w(dir.file("t.bin"), 2, 2);
    w.add("a", FeatureMatrix::Ones(2, 2));
    w.add("b", FeatureMatrix::Ones(2, 2));
    w.close();
  }
  std::filesystem::resize_file(dir.file("t.bin"), std::filesystem::file_size(dir.file("t.bin")) - 5);
  EXPECT_THROW(FeatureCache(dir.file("t.bin")), ValidationError);
}

TEST(FeatureCache, TextCacheLoadsIntoStore) {
  TempDir dir;
  HashTextEncoder enc(8);
  const std::vector<std::string> texts{"open the fridge", "slice the apple"};
  write_text_cache(dir.file("t.bin"), texts, enc);
  FeatureStore fs;
  fs.load_text_cache(dir.file("t.bin"));
  EXPECT_EQ(fs.text_dim(), 8);
  for (const auto& t : texts) EXPECT_EQ(fs.text(t), enc.embed(t));
  EXPECT_THROW(fs.text("unknown"), ValidationError);
  EXPECT_THROW(fs.add_text("short", std::vector<float>(3)), ValidationError);
  fs.add_boxes("a", FeatureMatrix::Zero(2, 3));
  EXPECT_THROW(fs.add_boxes("b", FeatureMatrix::Zero(3, 3)), ValidationError);
  EXPECT_THROW(fs.boxes("c"), ValidationError);
}

}  // namespace
}  // namespace physdyn
