#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "physdyn/errors.hpp"
#include "physdyn/image.hpp"
#include "physdyn/schema.hpp"

namespace physdyn {

// Intrinsic properties of one object type in the synthetic world.
struct ObjectType {
  std::string name;
  bool pickupable = false;
  bool openable = false;
  bool toggleable = false;
  bool sliceable = false;
  bool cookable = false;
  bool breakable = false;
  bool dirtyable = false;
  bool fillable = false;
  bool receptacle = false;
  int mass = 0;
  int base_size = 0;
  std::vector<int> materials;
  double frequency = 1.0;
};

enum Material : int {
  kCeramic = 0, kFabric, kFood, kGlass, kLeather, kMetal, kPaper,
  kPlastic, kRubber, kSoap, kSponge, kStone, kWax, kWood,
};

// Catalog order matters: a world with n types uses the first n entries.
inline const std::vector<ObjectType>& object_catalog() {
  static const std::vector<ObjectType> kCatalog = [] {
    std::vector<ObjectType> c;
    auto add = [&](ObjectType t) { c.push_back(std::move(t)); };
    add({.name = "Apple", .pickupable = true, .sliceable = true, .cookable = true, .mass = 1, .base_size = 1, .materials = {kFood}, .frequency = 1.0});
    add({.name = "Bread", .pickupable = true, .sliceable = true, .cookable = true, .mass = 1, .base_size = 2, .materials = {kFood}, .frequency = 1.0});
    add({.name = "Potato", .pickupable = true, .sliceable = true, .cookable = true, .mass = 1, .base_size = 1, .materials = {kFood}, .frequency = 0.8});
    add({.name = "Tomato", .pickupable = true, .sliceable = true, .cookable = true, .mass = 1, .base_size = 1, .materials = {kFood}, .frequency = 0.8});
    add({.name = "Lettuce", .pickupable = true, .sliceable = true, .mass = 1, .base_size = 2, .materials = {kFood}, .frequency = 0.6});
    add({.name = "Cup", .pickupable = true, .breakable = true, .dirtyable = true, .fillable = true, .receptacle = true, .mass = 1, .base_size = 1, .materials = {kCeramic}, .frequency = 1.0});
    add({.name = "Mug", .pickupable = true, .breakable = true, .dirtyable = true, .fillable = true, .receptacle = true, .mass = 1, .base_size = 1, .materials = {kCeramic}, .frequency = 1.0});
    add({.name = "Bowl", .pickupable = true, .breakable = true, .dirtyable = true, .fillable = true, .receptacle = true, .mass = 1, .base_size = 2, .materials = {kGlass}, .frequency = 0.9});
    add({.name = "Pan", .pickupable = true, .dirtyable = true, .receptacle = true, .mass = 2, .base_size = 3, .materials = {kMetal}, .frequency = 0.9});
    add({.name = "Pot", .pickupable = true, .dirtyable = true, .fillable = true, .receptacle = true, .mass = 2, .base_size = 3, .materials = {kMetal}, .frequency = 0.8});
    add({.name = "Plate", .pickupable = true, .breakable = true, .dirtyable = true, .receptacle = true, .mass = 1, .base_size = 2, .materials = {kCeramic}, .frequency = 0.8});
    add({.name = "Fridge", .openable = true, .receptacle = true, .mass = 3, .base_size = 7, .materials = {kMetal}, .frequency = 1.0});
    add({.name = "Microwave", .openable = true, .toggleable = true, .receptacle = true, .mass = 3, .base_size = 5, .materials = {kMetal, kGlass}, .frequency = 1.0});
    add({.name = "Cabinet", .openable = true, .receptacle = true, .mass = 3, .base_size = 6, .materials = {kWood}, .frequency = 0.9});
    add({.name = "CounterTop", .receptacle = true, .mass = 3, .base_size = 7, .materials = {kStone}, .frequency = 1.0});
    add({.name = "Laptop", .pickupable = true, .openable = true, .toggleable = true, .breakable = true, .mass = 2, .base_size = 3, .materials = {kPlastic, kMetal}, .frequency = 0.7});
    add({.name = "CellPhone", .pickupable = true, .toggleable = true, .breakable = true, .mass = 1, .base_size = 0, .materials = {kGlass, kPlastic}, .frequency = 0.5});
    add({.name = "Television", .toggleable = true, .breakable = true, .mass = 3, .base_size = 6, .materials = {kGlass, kPlastic}, .frequency = 0.5});
    add({.name = "Towel", .pickupable = true, .mass = 1, .base_size = 2, .materials = {kFabric}, .frequency = 0.3});
    add({.name = "SoapBar", .pickupable = true, .mass = 1, .base_size = 0, .materials = {kSoap}, .frequency = 0.3});
    add({.name = "Faucet", .toggleable = true, .mass = 0, .base_size = 2, .materials = {kMetal}, .frequency = 0.7});
    add({.name = "Candle", .pickupable = true, .mass = 1, .base_size = 0, .materials = {kWax}, .frequency = 0.5});
    add({.name = "Book", .pickupable = true, .openable = true, .mass = 1, .base_size = 2, .materials = {kPaper}, .frequency = 0.6});
    add({.name = "Sponge", .pickupable = true, .dirtyable = true, .mass = 1, .base_size = 0, .materials = {kSponge}, .frequency = 0.4});
    add({.name = "Toilet", .openable = true, .receptacle = true, .mass = 3, .base_size = 5, .materials = {kCeramic}, .frequency = 0.5});
    add({.name = "KeyChain", .pickupable = true, .mass = 1, .base_size = 0, .materials = {kMetal}, .frequency = 0.3});
    add({.name = "Statue", .pickupable = true, .breakable = true, .mass = 2, .base_size = 2, .materials = {kStone}, .frequency = 0.3});
    add({.name = "RemoteControl", .pickupable = true, .mass = 1, .base_size = 0, .materials = {kPlastic, kRubber}, .frequency = 0.4});
    add({.name = "Box", .pickupable = true, .openable = true, .receptacle = true, .mass = 1, .base_size = 3, .materials = {kPaper}, .frequency = 0.4});
    add({.name = "Vase", .pickupable = true, .breakable = true, .mass = 1, .base_size = 2, .materials = {kGlass}, .frequency = 0.3});
    return c;
  }();
  return kCatalog;
}

inline constexpr std::array<std::string_view, 8> kDistanceValues = {"0-1ft", "1-2ft", "2-3ft", "3-4ft",
                                                                    "4-5ft", "5-6ft", "6-7ft", "7+ft"};
inline constexpr std::array<std::string_view, 8> kSizeValues = {"xxs", "xs", "s", "m", "l", "xl", "xxl", "xxxl"};
inline constexpr std::array<std::string_view, 4> kMassValues = {"Massless", "Light", "Medium", "Heavy"};
inline constexpr std::array<std::string_view, 3> kTemperatureValues = {"Cold", "RoomTemp", "Hot"};
inline constexpr std::uint16_t kNo = 0;
inline constexpr std::uint16_t kYes = 1;
inline constexpr std::uint16_t kCold = 0;
inline constexpr std::uint16_t kRoomTemp = 1;
inline constexpr std::uint16_t kHot = 2;

// 38-attribute schema over the first `n_object_types` catalog entries.
// ObjectName and parentReceptacles both reserve index 0 for "None".
inline AttributeSchema make_synthetic_schema(std::size_t n_object_types) {
  const auto& catalog = object_catalog();
  if (n_object_types < 2 || n_object_types > catalog.size()) {
    throw ValidationError("n_object_types must lie in [2, " + std::to_string(catalog.size()) + "]");
  }
  std::vector<std::string> names = {"None"};
  std::vector<std::string> receptacles = {"None"};
  for (std::size_t i = 0; i < n_object_types; ++i) {
    names.push_back(catalog[i].name);
    if (catalog[i].receptacle) receptacles.push_back(catalog[i].name);
  }
  auto strings = [](auto arr) { return std::vector<std::string>(arr.begin(), arr.end()); };
  const std::vector<std::string> binary = {"No", "Yes"};
  std::vector<std::pair<std::string, std::vector<std::string>>> vocab;
  for (std::size_t i = 0; i < kNumAttributes; ++i) {
    const std::string name(kAttributeNames[i]);
    switch (i) {
      case attr::kObjectName: vocab.emplace_back(name, names); break;
      case attr::kParentReceptacles: vocab.emplace_back(name, receptacles); break;
      case attr::kReceptacleObjectIds: vocab.emplace_back(name, std::vector<std::string>{"None", "Occupied"}); break;
      case attr::kDistance: vocab.emplace_back(name, strings(kDistanceValues)); break;
      case attr::kMass: vocab.emplace_back(name, strings(kMassValues)); break;
      case attr::kSize: vocab.emplace_back(name, strings(kSizeValues)); break;
      case attr::kTemperature: vocab.emplace_back(name, strings(kTemperatureValues)); break;
      default: vocab.emplace_back(name, binary); break;
    }
  }
  return AttributeSchema::from_vocabularies(std::move(vocab));
}

// --- rule table ------------------------------------------------------------

// Deterministic effect of an action on (target, other). Effects whose guard
// fails leave the states unchanged; `other` only changes for Put.
inline std::pair<ObjectState, ObjectState> apply_rules(const AttributeSchema& schema, int action_id,
                                                       const ObjectState& target, const ObjectState& other) {
  ObjectState t = target;
  ObjectState o = other;
  if (t.is_none) return {t, o};
  auto is = [&](const ObjectState& s, std::size_t a) { return s.values[a] == kYes; };
  switch (static_cast<Action>(action_id)) {
    case Action::kOpen:
      if (is(t, attr::kOpenable)) t.values[attr::kIsOpen] = kYes;
      break;
    case Action::kClose:
      if (is(t, attr::kOpenable)) t.values[attr::kIsOpen] = kNo;
      break;
    case Action::kToggleOn:
      if (is(t, attr::kToggleable)) t.values[attr::kIsToggled] = kYes;
      break;
    case Action::kToggleOff:
      if (is(t, attr::kToggleable)) t.values[attr::kIsToggled] = kNo;
      break;
    case Action::kSlice:
      if (is(t, attr::kSliceable) && !is(t, attr::kIsSliced)) {
        t.values[attr::kIsSliced] = kYes;
        if (t.values[attr::kSize] > 0) --t.values[attr::kSize];
      }
      break;
    case Action::kDirty:
      if (is(t, attr::kDirtyable)) t.values[attr::kIsDirty] = kYes;
      break;
    case Action::kEmptyLiquid:
      if (is(t, attr::kIsFilledWithLiquid)) t.values[attr::kIsFilledWithLiquid] = kNo;
      break;
    case Action::kHeatUpPan:
      if (schema.object_name(t.values[attr::kObjectName]) == "Pan") t.values[attr::kTemperature] = kHot;
      break;
    case Action::kPickup:
      if (is(t, attr::kPickupable) && !is(t, attr::kIsPickedUp)) {
        t.values[attr::kIsPickedUp] = kYes;
        t.values[attr::kDistance] = 0;
        t.values[attr::kParentReceptacles] = 0;
      }
      break;
    case Action::kPut:
      if (is(t, attr::kIsPickedUp) && !o.is_none && is(o, attr::kReceptacle)) {
        const auto parent = schema.find_value(attr::kParentReceptacles,
                                              schema.object_name(o.values[attr::kObjectName]));
        if (parent) {
          t.values[attr::kIsPickedUp] = kNo;
          t.values[attr::kParentReceptacles] = static_cast<std::uint16_t>(*parent);
          t.values[attr::kDistance] = o.values[attr::kDistance];
          o.values[attr::kReceptacleObjectIds] = 1;
        }
      }
      break;
  }
  return {t, o};
}

// --- rendering -------------------------------------------------------------

inline constexpr Rgb kBackground{200, 200, 200};
inline constexpr Rgb kOpenColor{0, 0, 0};
inline constexpr Rgb kLiquidColor{0, 0, 255};
inline constexpr Rgb kToggleColor{255, 255, 0};
inline constexpr Rgb kSliceColor{40, 40, 40};
inline constexpr Rgb kDirtColor{120, 70, 20};
inline constexpr Rgb kBrokenColor{255, 0, 0};
inline constexpr int kStripHeight = 3;

// Distinct saturated colour per catalog entry, far from grey and the marker colours.
inline Rgb type_color(std::size_t catalog_index) {
  const double hue = std::fmod(catalog_index * 0.618033988749895, 1.0) * 6.0;
  const int sector = static_cast<int>(hue);
  const double f = hue - sector;
  const double hi = 230, lo = 70;
  const double up = lo + (hi - lo) * f, down = hi - (hi - lo) * f;
  double r = 0, g = 0, b = 0;
  switch (sector % 6) {
    case 0: r = hi, g = up, b = lo; break;
    case 1: r = down, g = hi, b = lo; break;
    case 2: r = lo, g = hi, b = up; break;
    case 3: r = lo, g = down, b = hi; break;
    case 4: r = up, g = lo, b = hi; break;
    default: r = hi, g = lo, b = down; break;
  }
  // Keep clear of the exact marker colours.
  return {static_cast<std::uint8_t>(r + catalog_index % 3), static_cast<std::uint8_t>(g + 1),
          static_cast<std::uint8_t>(b + 2)};
}

struct RenderGeometry {
  int width = 128;
  int height = 96;
  int slots = 4;

  int slot_width() const { return width / slots; }
  int side(int size_value) const { return std::min(8 + 2 * size_value, slot_width() - 4); }
  int bottom(int distance_value) const {
    const int max_side = side(7);
    const int step = std::max(1, (height - 6 - kStripHeight - max_side - 2) / 7);
    return height - 6 - step * distance_value;
  }
  Rect object_rect(const ObjectState& s, int slot) const {
    const int sd = side(s.values[attr::kSize]);
    const int b = bottom(s.values[attr::kDistance]);
    return {slot * slot_width() + (slot_width() - sd) / 2, b - sd, sd, sd};
  }
  void validate() const {
    if (slots < 2) throw ValidationError("a scene needs at least two object slots");
    if (slot_width() < 14) throw ValidationError("image too narrow for the requested object count");
    if (height < 48) throw ValidationError("image height must be at least 48");
  }
};

// Scene object placed in a slot, with the catalog index of its type.
struct SceneObject {
  std::size_t type = 0;
  int slot = 0;
  ObjectState state;
};

inline Image render_scene(const std::vector<SceneObject>& objects, const AttributeSchema& schema,
                          const RenderGeometry& g) {
  Image img(g.width, g.height);
  fill_rect(img, {0, 0, g.width, g.height}, kBackground);
  const auto& catalog = object_catalog();
  for (const auto& so : objects) {
    const auto& s = so.state;
    if (s.is_none) continue;
    const Rect r = g.object_rect(s, so.slot);
    const Rgb color = type_color(so.type);
    fill_rect(img, r, color);
    Rect inner{r.x + 1, r.y + 1, r.w - 2, r.h - 2};
    Rgb fill = color;
    if (s.values[attr::kIsCooked] == kYes) {
      fill = {static_cast<std::uint8_t>(color.r * 6 / 10), static_cast<std::uint8_t>(color.g * 6 / 10),
              static_cast<std::uint8_t>(color.b * 6 / 10)};
    }
    fill_rect(img, inner, fill);
    if (s.values[attr::kIsOpen] == kYes) fill_rect(img, {r.x + 3, r.y + 3, r.w - 6, r.h - 6}, kOpenColor);
    if (s.values[attr::kIsFilledWithLiquid] == kYes) {
      fill_rect(img, {inner.x, inner.y + inner.h * 2 / 3, inner.w, inner.h - inner.h * 2 / 3}, kLiquidColor);
    }
    if (s.values[attr::kIsToggled] == kYes) fill_rect(img, {inner.x, inner.y, inner.w, 2}, kToggleColor);
    if (s.values[attr::kIsSliced] == kYes) {
      for (int x = inner.x + 2; x < inner.x + inner.w; x += 3) fill_rect(img, {x, inner.y, 1, inner.h}, kSliceColor);
    }
    if (s.values[attr::kIsDirty] == kYes) {
      for (int y = inner.y; y < inner.y + inner.h; y += 2) {
        for (int x = inner.x + (y % 4 == 0 ? 0 : 2); x < inner.x + inner.w; x += 4) img.set(x, y, kDirtColor.r, kDirtColor.g, kDirtColor.b);
      }
    }
    if (s.values[attr::kIsBroken] == kYes) {
      for (int k = 0; k < std::min(inner.w, inner.h); ++k) img.set(inner.x + k, inner.y + k, kBrokenColor.r, kBrokenColor.g, kBrokenColor.b);
    }
    const auto parent = s.values[attr::kParentReceptacles];
    if (parent != 0) {
      const auto& pname = schema.attribute(attr::kParentReceptacles).values.at(parent);
      for (std::size_t c = 0; c < catalog.size(); ++c) {
        if (catalog[c].name == pname) {
          fill_rect(img, {r.x, r.y + r.h, r.w, kStripHeight}, type_color(c));
          break;
        }
      }
    }
  }
  return img;
}

// Uniform global shift that changes nearly every position (camera/lighting change).
inline void apply_lighting_change(Image& img) {
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(v >= 60 ? v - 60 : v + 60);
}

// --- generator -------------------------------------------------------------

struct SyntheticWorldConfig {
  std::size_t n_objects = 4;          // objects per scene: the two trajectory objects plus clutter
  std::size_t n_object_types = 20;
  std::size_t n_trajectories = 1000;
  int image_width = 128;
  int image_height = 96;
  double viewpoint_change_rate = 0.04;
  bool with_text = false;
  std::string id_prefix = "t";

  void validate() const {
    if (n_objects < 2) throw ValidationError("n_objects must be at least 2");
    if (n_object_types < n_objects) throw ValidationError("n_object_types must be at least n_objects");
    if (n_trajectories == 0) throw ValidationError("n_trajectories must be positive");
    if (image_width <= 0 || image_height <= 0) throw ValidationError("image size must be positive");
    if (viewpoint_change_rate < 0 || viewpoint_change_rate > 1) throw ValidationError("viewpoint_change_rate must lie in [0, 1]");
    RenderGeometry{image_width, image_height, static_cast<int>(n_objects)}.validate();
  }
};

// Generator-side ground truth for one scene; rects are what the renderer drew.
struct SceneLayout {
  struct Entry {
    std::size_t type = 0;
    int name_value = 0;
    int trajectory_slot = -1;  // 0 or 1 for the trajectory objects, -1 for clutter
    Rect rect_pre;
    Rect rect_post;
  };
  std::vector<Entry> entries;
  bool lighting_changed = false;
};

struct SyntheticWorld {
  AttributeSchema schema;
  std::vector<TrajectoryRecord> records;
  std::vector<ImagePair> images;
  std::vector<SceneLayout> layouts;
};

namespace detail {

inline std::size_t sample_weighted(std::mt19937_64& rng, const std::vector<double>& w) {
  std::discrete_distribution<std::size_t> d(w.begin(), w.end());
  return d(rng);
}

inline bool coin(std::mt19937_64& rng, double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

inline bool supports(const ObjectType& t, Action a) {
  switch (a) {
    case Action::kOpen:
    case Action::kClose: return t.openable;
    case Action::kToggleOn:
    case Action::kToggleOff: return t.toggleable;
    case Action::kSlice: return t.sliceable;
    case Action::kDirty: return t.dirtyable;
    case Action::kEmptyLiquid: return t.fillable;
    case Action::kHeatUpPan: return t.name == "Pan";
    case Action::kPickup:
    case Action::kPut: return t.pickupable;
  }
  return false;
}

inline ObjectState sample_state(std::mt19937_64& rng, const AttributeSchema& schema, std::size_t type) {
  const auto& t = object_catalog()[type];
  ObjectState s;
  s.values.assign(kNumAttributes, kNo);
  auto yes = [](bool b) { return b ? kYes : kNo; };
  s.values[attr::kObjectName] = static_cast<std::uint16_t>(type + 1);
  s.values[attr::kMass] = static_cast<std::uint16_t>(t.mass);
  const double jitter = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  int size = t.base_size + (jitter < 0.15 ? -1 : jitter > 0.85 ? 1 : 0);
  s.values[attr::kSize] = static_cast<std::uint16_t>(std::clamp(size, 0, 7));
  static const std::vector<double> kDistanceWeights = {0.05, 0.2, 0.25, 0.2, 0.12, 0.08, 0.06, 0.04};
  s.values[attr::kDistance] = static_cast<std::uint16_t>(sample_weighted(rng, kDistanceWeights));
  static const std::vector<double> kTemperatureWeights = {0.1, 0.8, 0.1};
  s.values[attr::kTemperature] = static_cast<std::uint16_t>(sample_weighted(rng, kTemperatureWeights));
  s.values[attr::kBreakable] = yes(t.breakable);
  s.values[attr::kCookable] = yes(t.cookable);
  s.values[attr::kDirtyable] = yes(t.dirtyable);
  s.values[attr::kOpenable] = yes(t.openable);
  s.values[attr::kPickupable] = yes(t.pickupable);
  s.values[attr::kReceptacle] = yes(t.receptacle);
  s.values[attr::kSliceable] = yes(t.sliceable);
  s.values[attr::kToggleable] = yes(t.toggleable);
  for (int m : t.materials) s.values[attr::kFirstMaterial + static_cast<std::size_t>(m)] = kYes;
  if (t.breakable) s.values[attr::kIsBroken] = yes(coin(rng, 0.05));
  if (t.cookable) s.values[attr::kIsCooked] = yes(coin(rng, 0.1));
  if (t.dirtyable) s.values[attr::kIsDirty] = yes(coin(rng, 0.3));
  if (t.fillable) s.values[attr::kIsFilledWithLiquid] = yes(coin(rng, 0.4));
  if (t.openable) s.values[attr::kIsOpen] = yes(coin(rng, 0.5));
  if (t.toggleable) s.values[attr::kIsToggled] = yes(coin(rng, 0.5));
  if (t.sliceable) s.values[attr::kIsSliced] = yes(coin(rng, 0.15));
  if (t.receptacle) s.values[attr::kReceptacleObjectIds] = coin(rng, 0.5) ? 1 : 0;
  const std::size_t n_receptacles = schema.vocabulary_size(attr::kParentReceptacles);
  if (t.pickupable && coin(rng, 0.15)) {
    s.values[attr::kIsPickedUp] = kYes;
    s.values[attr::kDistance] = 0;
  } else if (t.pickupable && n_receptacles > 1 && coin(rng, 0.8)) {
    std::uniform_int_distribution<std::size_t> d(1, n_receptacles - 1);
    s.values[attr::kParentReceptacles] = static_cast<std::uint16_t>(d(rng));
  }
  return s;
}

// Force the state to satisfy the action's precondition on the target.
inline void enforce_precondition(ObjectState& s, Action a) {
  switch (a) {
    case Action::kOpen: s.values[attr::kIsOpen] = kNo; break;
    case Action::kClose: s.values[attr::kIsOpen] = kYes; break;
    case Action::kToggleOn: s.values[attr::kIsToggled] = kNo; break;
    case Action::kToggleOff: s.values[attr::kIsToggled] = kYes; break;
    case Action::kSlice: s.values[attr::kIsSliced] = kNo; break;
    case Action::kDirty: s.values[attr::kIsDirty] = kNo; break;
    case Action::kEmptyLiquid: s.values[attr::kIsFilledWithLiquid] = kYes; break;
    case Action::kHeatUpPan:
      if (s.values[attr::kTemperature] == kHot) s.values[attr::kTemperature] = kRoomTemp;
      break;
    case Action::kPickup:
      s.values[attr::kIsPickedUp] = kNo;
      if (s.values[attr::kDistance] == 0) s.values[attr::kDistance] = 1;
      break;
    case Action::kPut:
      s.values[attr::kIsPickedUp] = kYes;
      s.values[attr::kDistance] = 0;
      s.values[attr::kParentReceptacles] = 0;
      break;
  }
}

inline std::string action_sentence(std::mt19937_64& rng, Action a, const std::string& object,
                                   const std::string& receptacle) {
  const std::string o = label_text(object);
  const std::string r = label_text(receptacle);
  std::vector<std::string> options;
  switch (a) {
    case Action::kOpen: options = {"the robot opens the " + o, "robot opens up the " + o}; break;
    case Action::kClose: options = {"the robot closes the " + o, "robot shuts the " + o}; break;
    case Action::kToggleOn: options = {"the robot turns on the " + o, "robot switches the " + o + " on"}; break;
    case Action::kToggleOff: options = {"the robot turns off the " + o, "robot switches the " + o + " off"}; break;
    case Action::kSlice: options = {"the robot slices the " + o, "robot cuts the " + o + " into pieces"}; break;
    case Action::kDirty: options = {"the robot dirties the " + o, "robot makes the " + o + " dirty"}; break;
    case Action::kEmptyLiquid: options = {"the robot empties the " + o, "robot pours out the " + o}; break;
    case Action::kHeatUpPan: options = {"the robot heats up the " + o, "robot warms the " + o}; break;
    case Action::kPickup: options = {"the robot picks up the " + o, "robot grabs the " + o}; break;
    case Action::kPut: options = {"the robot puts the " + o + " in the " + r, "robot places the " + o + " on the " + r}; break;
  }
  std::uniform_int_distribution<std::size_t> d(0, options.size() - 1);
  return options[d(rng)];
}

}  // namespace detail

inline SyntheticWorld generate_synthetic_world(const SyntheticWorldConfig& config, std::uint64_t seed) {
  config.validate();
  const auto& catalog = object_catalog();
  SyntheticWorld world;
  world.schema = make_synthetic_schema(config.n_object_types);
  const auto& schema = world.schema;
  const RenderGeometry geometry{config.image_width, config.image_height, static_cast<int>(config.n_objects)};
  std::mt19937_64 rng(seed);

  std::vector<Action> actions;
  for (std::size_t a = 0; a < kNumActions; ++a) {
    for (std::size_t t = 0; t < config.n_object_types; ++t) {
      if (detail::supports(catalog[t], static_cast<Action>(a))) {
        actions.push_back(static_cast<Action>(a));
        break;
      }
    }
  }
  bool has_receptacle = false;
  for (std::size_t t = 0; t < config.n_object_types; ++t) has_receptacle |= catalog[t].receptacle;
  if (!has_receptacle) std::erase(actions, Action::kPut);

  const std::size_t digits = std::to_string(config.n_trajectories - 1).size();
  for (std::size_t n = 0; n < config.n_trajectories; ++n) {
    const Action action = actions[std::uniform_int_distribution<std::size_t>(0, actions.size() - 1)(rng)];

    std::vector<double> target_w(config.n_object_types, 0.0);
    for (std::size_t t = 0; t < config.n_object_types; ++t) {
      if (detail::supports(catalog[t], action)) target_w[t] = catalog[t].frequency;
    }
    const std::size_t target_type = detail::sample_weighted(rng, target_w);

    std::vector<double> other_w(config.n_object_types, 0.0);
    for (std::size_t t = 0; t < config.n_object_types; ++t) {
      if (t == target_type) continue;
      if (action == Action::kPut && !catalog[t].receptacle) continue;
      other_w[t] = catalog[t].frequency;
    }
    const std::size_t other_type = detail::sample_weighted(rng, other_w);

    ObjectState target = detail::sample_state(rng, schema, target_type);
    detail::enforce_precondition(target, action);
    ObjectState other = detail::sample_state(rng, schema, other_type);
    if (action == Action::kPut && catalog[other_type].openable) other.values[attr::kIsOpen] = kYes;

    auto [target_post, other_post] = apply_rules(schema, static_cast<int>(action), target, other);

    TrajectoryRecord rec;
    std::string num = std::to_string(n);
    rec.id = config.id_prefix + std::string(digits - num.size(), '0') + num;
    rec.objects_pre = {target, other};
    rec.objects_post = {target_post, other_post};
    rec.action.action_id = static_cast<int>(action);
    rec.action.object_name = static_cast<int>(target_type + 1);
    rec.action.receptacle_name = action == Action::kPut ? static_cast<int>(other_type + 1) : 0;
    rec.image_pre = rec.id + "_pre";
    rec.image_post = rec.id + "_post";

    // Clutter: distinct types not used by the trajectory.
    std::vector<std::size_t> pool;
    for (std::size_t t = 0; t < config.n_object_types; ++t) {
      if (t != target_type && t != other_type) pool.push_back(t);
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<int> slots(config.n_objects);
    for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = static_cast<int>(i);
    std::shuffle(slots.begin(), slots.end(), rng);

    std::vector<SceneObject> pre_scene, post_scene;
    SceneLayout layout;
    auto place = [&](std::size_t type, const ObjectState& pre, const ObjectState& post, int slot, int traj_slot) {
      pre_scene.push_back({type, slot, pre});
      post_scene.push_back({type, slot, post});
      layout.entries.push_back({type, static_cast<int>(type + 1), traj_slot, geometry.object_rect(pre, slot),
                                geometry.object_rect(post, slot)});
    };
    place(target_type, target, target_post, slots[0], 0);
    place(other_type, other, other_post, slots[1], 1);
    for (std::size_t c = 0; c + 2 < config.n_objects; ++c) {
      ObjectState s = detail::sample_state(rng, schema, pool[c]);
      place(pool[c], s, s, slots[c + 2], -1);
    }

    ImagePair pair{render_scene(pre_scene, schema, geometry), render_scene(post_scene, schema, geometry)};
    if (detail::coin(rng, config.viewpoint_change_rate)) {
      apply_lighting_change(pair.post);
      layout.lighting_changed = true;
    }
    if (config.with_text) {
      rec.action.text = detail::action_sentence(rng, action, catalog[target_type].name,
                                                action == Action::kPut ? catalog[other_type].name : "");
    }
    world.records.push_back(std::move(rec));
    world.images.push_back(std::move(pair));
    world.layouts.push_back(std::move(layout));
  }
  return world;
}

}  // namespace physdyn
