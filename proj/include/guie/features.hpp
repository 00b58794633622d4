#pragma once

// Precomputed backbone features, JSONL manifests, dataset subsampling rules
// and class-disjoint split construction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "guie/byte_io.hpp"
#include "guie/error.hpp"
#include "guie/rng.hpp"

namespace guie {

inline constexpr std::uint32_t kUnlabeled = 0xFFFFFFFFu;

/// Side length the backbone consumes; geometry features are expressed in it.
inline constexpr float kBackboneSide = 224.0f;

/// Aspect ratio fed to the head is width / height (not height / width).
inline constexpr bool kAspectIsWidthOverHeight = true;

/// Number of geometry components appended to every backbone feature.
inline constexpr std::size_t kGeometryDim = 3;

enum class Category : std::uint8_t { unknown = 0, apparel = 1, packaged = 2, toy = 3, other = 4 };

inline std::string_view to_string(Category c) {
  switch (c) {
    case Category::apparel: return "apparel";
    case Category::packaged: return "packaged";
    case Category::toy: return "toy";
    case Category::other: return "other";
    case Category::unknown: break;
  }
  return "unknown";
}

inline std::optional<Category> parse_category(std::string_view s) {
  if (s == "apparel") return Category::apparel;
  if (s == "packaged") return Category::packaged;
  if (s == "toy") return Category::toy;
  if (s == "other") return Category::other;
  if (s == "unknown") return Category::unknown;
  return std::nullopt;
}

enum class Split : std::uint8_t { train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: break;
  }
  return "test";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Feature store

struct FeatureRecord {
  std::string image_id;
  std::uint32_t class_id = kUnlabeled;
  std::uint16_t width = 1;
  std::uint16_t height = 1;
  Category category = Category::unknown;
  std::vector<float> feature;

  bool operator==(const FeatureRecord&) const = default;
};

/// Id-unique collection of equal-length feature vectors.
class FeatureStore {
public:
  FeatureStore() = default;
  explicit FeatureStore(std::uint32_t dimension) : dimension_(dimension) {
    if (dimension == 0) throw DomainError("feature dimension must be positive");
  }

  /// Appends a record after checking every store invariant.
  void add(FeatureRecord r) {
    if (r.image_id.empty()) throw DomainError("empty image_id");
    if (r.feature.size() != dimension_)
      throw DomainError("record \"" + r.image_id + "\" has " + std::to_string(r.feature.size()) +
                        " components, store dimension is " + std::to_string(dimension_));
    if (r.width == 0 || r.height == 0)
      throw DomainError("record \"" + r.image_id + "\" has a zero pixel dimension");
    for (float v : r.feature)
      if (!std::isfinite(v)) throw DomainError("record \"" + r.image_id + "\" has a non-finite feature");
    if (!index_.emplace(r.image_id, records_.size()).second) throw DuplicateIdError(r.image_id);
    records_.push_back(std::move(r));
  }

  std::uint32_t dimension() const noexcept { return dimension_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  const std::vector<FeatureRecord>& records() const noexcept { return records_; }
  const FeatureRecord& operator[](std::size_t i) const { return records_[i]; }

  const FeatureRecord* find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &records_[it->second];
  }

  const FeatureRecord& at(std::string_view id) const {
    if (const auto* r = find(id)) return *r;
    throw DomainError("image_id \"" + std::string(id) + "\" not found in feature store");
  }

  bool operator==(const FeatureStore& o) const {
    return dimension_ == o.dimension_ && records_ == o.records_;
  }

private:
  std::uint32_t dimension_ = 0;
  std::vector<FeatureRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr std::string_view kFeatureMagic = "GUIEFEAT";
inline constexpr std::uint16_t kFeatureVersion = 1;

/// Serializes a store to the GUIEFEAT container (all integers and floats
/// little-endian):
///   magic[8] version:u16 dim:u32 count:u64
///   count x { id_len:u16 id[id_len] class_id:u32 width:u16 height:u16
///             category:u8 feature:f32[dim] }
inline std::string write_feature_file(const FeatureStore& store) {
  ByteWriter w;
  w.bytes(kFeatureMagic);
  w.u16(kFeatureVersion);
  w.u32(store.dimension());
  w.u64(store.size());
  for (const auto& r : store.records()) {
    if (r.feature.size() != store.dimension())
      throw FormatError("dimension mismatch for \"" + r.image_id + "\"");
    if (r.image_id.size() > 0xFFFF) throw FormatError("image_id longer than 65535 bytes");
    w.u16(static_cast<std::uint16_t>(r.image_id.size()));
    w.bytes(r.image_id);
    w.u32(r.class_id);
    w.u16(r.width);
    w.u16(r.height);
    w.u8(static_cast<std::uint8_t>(r.category));
    w.f32s(r.feature);
  }
  return std::move(w).take();
}

/// Parses a GUIEFEAT container. When `expected_dimension` is given the
/// header dimension must equal it.
inline FeatureStore read_feature_file(std::string_view bytes,
                                      std::optional<std::uint32_t> expected_dimension = std::nullopt) {
  ByteReader in(bytes);
  if (bytes.size() < kFeatureMagic.size() || bytes.substr(0, kFeatureMagic.size()) != kFeatureMagic)
    throw FormatError("bad magic: not a GUIEFEAT file");
  in.bytes(kFeatureMagic.size(), "magic");
  const auto version = in.u16("version");
  if (version != kFeatureVersion)
    throw FormatError("unsupported GUIEFEAT version " + std::to_string(version));
  const auto dim = in.u32("dimension");
  if (dim == 0) throw FormatError("dimension mismatch: header dimension is 0");
  if (expected_dimension && *expected_dimension != dim)
    throw FormatError("dimension mismatch: file has " + std::to_string(dim) + ", expected " +
                      std::to_string(*expected_dimension));
  const auto count = in.u64("record count");
  // Each record needs at least 11 header bytes plus the floats.
  if (count > in.remaining() / (11 + 4ull * dim))
    throw FormatError("truncated record: header claims " + std::to_string(count) + " records");

  FeatureStore store(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    FeatureRecord r;
    const auto id_len = in.u16("id length");
    r.image_id = std::string(in.bytes(id_len, "image_id"));
    r.class_id = in.u32("class_id");
    r.width = in.u16("width");
    r.height = in.u16("height");
    const auto cat = in.u8("category");
    if (cat > static_cast<std::uint8_t>(Category::other))
      throw FormatError("record " + std::to_string(i) + ": invalid category code " + std::to_string(cat));
    r.category = static_cast<Category>(cat);
    r.feature.resize(dim);
    in.f32s(r.feature, "feature vector");
    try {
      store.add(std::move(r));
    } catch (const DuplicateIdError&) {
      throw;
    } catch (const DomainError& e) {
      throw FormatError(std::string("record ") + std::to_string(i) + ": " + e.what());
    }
  }
  if (in.remaining() != 0) throw FormatError(std::to_string(in.remaining()) + " trailing bytes after last record");
  return store;
}

// ---------------------------------------------------------------------------
// Geometry

/// [height / 224, width / 224, width / height] with real division.
inline std::array<float, kGeometryDim> geometry_features(std::uint32_t width, std::uint32_t height) {
  if (width == 0 || height == 0) throw DomainError("geometry_features: zero pixel dimension");
  const float w = static_cast<float>(width);
  const float h = static_cast<float>(height);
  const float aspect = kAspectIsWidthOverHeight ? w / h : h / w;
  return {h / kBackboneSide, w / kBackboneSide, aspect};
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string image_id;
  std::uint32_t class_id = kUnlabeled;
  std::string dataset_name;
  std::uint16_t width = 1;
  std::uint16_t height = 1;
  Category category = Category::unknown;
  std::optional<Split> split;

  bool labeled() const noexcept { return class_id != kUnlabeled; }
  bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
  std::vector<ManifestEntry> entries;

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }
  bool operator==(const Manifest&) const = default;
};

namespace detail {

inline std::uint16_t pixel_field(const nlohmann::json& obj, const char* key, std::size_t line) {
  if (!obj.contains(key)) throw ParseError(line, std::string("missing field \"") + key + "\"");
  const auto& v = obj.at(key);
  if (!v.is_number_integer()) throw ParseError(line, std::string("field \"") + key + "\" must be an integer");
  const auto n = v.get<std::int64_t>();
  if (n < 1 || n > 0xFFFF) throw ParseError(line, std::string("field \"") + key + "\" out of range [1, 65535]");
  return static_cast<std::uint16_t>(n);
}

inline std::string string_field(const nlohmann::json& obj, const char* key, std::size_t line) {
  if (!obj.contains(key)) throw ParseError(line, std::string("missing field \"") + key + "\"");
  const auto& v = obj.at(key);
  if (!v.is_string()) throw ParseError(line, std::string("field \"") + key + "\" must be a string");
  return v.get<std::string>();
}

inline void require_labeled(const ManifestEntry& e, const char* op) {
  if (!e.labeled()) throw DomainError(std::string(op) + ": entry \"" + e.image_id + "\" has no class_id");
}

/// Entry indices grouped by class, classes in ascending id order, indices in
/// manifest order.
inline std::map<std::uint32_t, std::vector<std::size_t>> group_by_class(const Manifest& m, const char* op) {
  std::map<std::uint32_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    require_labeled(m.entries[i], op);
    groups[m.entries[i].class_id].push_back(i);
  }
  return groups;
}

template <class Keep>
Manifest select(const Manifest& m, Keep keep) {
  Manifest out;
  for (std::size_t i = 0; i < m.entries.size(); ++i)
    if (keep(i)) out.entries.push_back(m.entries[i]);
  return out;
}

}  // namespace detail

/// Parses JSON Lines. Blank lines are skipped; line numbers in errors are
/// 1-based physical lines.
inline Manifest parse_manifest(std::string_view text) {
  Manifest m;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(line_no, "record is not a JSON object");

    ManifestEntry e;
    e.image_id = detail::string_field(obj, "image_id", line_no);
    if (e.image_id.empty()) throw ParseError(line_no, "empty image_id");
    e.dataset_name = detail::string_field(obj, "dataset_name", line_no);
    e.width = detail::pixel_field(obj, "width", line_no);
    e.height = detail::pixel_field(obj, "height", line_no);
    if (obj.contains("class_id") && !obj.at("class_id").is_null()) {
      const auto& c = obj.at("class_id");
      if (!c.is_number_integer()) throw ParseError(line_no, "field \"class_id\" must be an integer");
      const auto v = c.get<std::int64_t>();
      if (v < 0 || v >= static_cast<std::int64_t>(kUnlabeled))
        throw ParseError(line_no, "field \"class_id\" out of range");
      e.class_id = static_cast<std::uint32_t>(v);
    }
    if (obj.contains("category") && !obj.at("category").is_null()) {
      const auto s = detail::string_field(obj, "category", line_no);
      const auto c = parse_category(s);
      if (!c) throw ParseError(line_no, "unknown category \"" + s + "\"");
      e.category = *c;
    }
    if (obj.contains("split") && !obj.at("split").is_null()) {
      const auto s = detail::string_field(obj, "split", line_no);
      e.split = parse_split(s);
      if (!e.split) throw ParseError(line_no, "unknown split \"" + s + "\"");
      if (!e.labeled()) throw ParseError(line_no, "entries with a split need a class_id");
    }
    if (!seen.insert(e.image_id).second) throw DuplicateIdError(e.image_id);
    m.entries.push_back(std::move(e));
  }
  return m;
}

/// Inverse of parse_manifest. Unlabeled entries omit class_id; unknown
/// category and absent split are omitted.
inline std::string to_jsonl(const Manifest& m) {
  std::string out;
  for (const auto& e : m.entries) {
    nlohmann::ordered_json j;
    j["image_id"] = e.image_id;
    if (e.labeled()) j["class_id"] = e.class_id;
    j["dataset_name"] = e.dataset_name;
    j["width"] = e.width;
    j["height"] = e.height;
    if (e.category != Category::unknown) j["category"] = to_string(e.category);
    if (e.split) j["split"] = to_string(*e.split);
    out += j.dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset rules

/// Keeps entries whose class has at least `min_samples` entries.
inline Manifest filter_min_class_size(const Manifest& m, std::size_t min_samples) {
  if (min_samples == 0) throw DomainError("filter_min_class_size: min_samples must be positive");
  std::unordered_map<std::uint32_t, std::size_t> counts;
  for (const auto& e : m.entries) {
    detail::require_labeled(e, "filter_min_class_size");
    ++counts[e.class_id];
  }
  return detail::select(m, [&](std::size_t i) { return counts[m.entries[i].class_id] >= min_samples; });
}

/// Distinct class ids in ascending order.
inline std::vector<std::uint32_t> distinct_classes(const Manifest& m) {
  std::set<std::uint32_t> s;
  for (const auto& e : m.entries) s.insert(e.class_id);
  return {s.begin(), s.end()};
}

/// Uniform sample of `n_classes` classes without replacement: distinct ids
/// sorted ascending, partial Fisher-Yates over the first n positions.
inline std::vector<std::uint32_t> choose_classes(std::vector<std::uint32_t> classes, std::size_t n,
                                                 SplitMix64& rng) {
  partial_shuffle<std::uint32_t>(classes, n, rng);
  classes.resize(n);
  return classes;
}

inline Manifest sample_classes(const Manifest& m, std::size_t n_classes, std::uint64_t seed) {
  if (n_classes == 0) throw DomainError("sample_classes: n_classes must be positive");
  for (const auto& e : m.entries) detail::require_labeled(e, "sample_classes");
  auto classes = distinct_classes(m);
  if (n_classes > classes.size())
    throw DomainError("sample_classes: requested " + std::to_string(n_classes) + " classes, only " +
                      std::to_string(classes.size()) + " available");
  SplitMix64 rng(seed);
  const auto chosen_list = choose_classes(std::move(classes), n_classes, rng);
  const std::unordered_set<std::uint32_t> chosen(chosen_list.begin(), chosen_list.end());
  return detail::select(m, [&](std::size_t i) { return chosen.contains(m.entries[i].class_id); });
}

/// Retains at most `cap` entries per class. Classes over the cap are visited
/// in ascending id order, each drawing a partial Fisher-Yates sample of its
/// entry positions from one shared generator. Output keeps manifest order.
inline Manifest cap_per_class(const Manifest& m, std::size_t cap, std::uint64_t seed) {
  if (cap == 0) throw DomainError("cap_per_class: cap must be positive");
  const auto groups = detail::group_by_class(m, "cap_per_class");
  SplitMix64 rng(seed);
  std::vector<bool> keep(m.entries.size(), true);
  for (auto [cls, idx] : groups) {
    if (idx.size() <= cap) continue;
    partial_shuffle<std::size_t>(idx, cap, rng);
    for (std::size_t j = cap; j < idx.size(); ++j) keep[idx[j]] = false;
  }
  return detail::select(m, [&](std::size_t i) { return keep[i]; });
}

struct SplitSpec {
  double train_fraction = 0.8;
  std::size_t zeroshot_class_count = 0;
  std::uint64_t seed = 0;
};

struct Splits {
  Manifest train;
  Manifest val;
  Manifest zeroshot_test;
};

/// Number of train entries for a class of `count` entries: ceil(f * count),
/// with a 1e-9 slack so that e.g. 0.7 * 10 does not round up to 8.
inline std::size_t train_count(double train_fraction, std::size_t count) {
  const double raw = train_fraction * static_cast<double>(count);
  auto n = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::min(n, count);
}

/// Class-disjoint zero-shot split plus per-class train/val split.
///
/// One generator seeded with `spec.seed` first picks the zero-shot classes
/// (same procedure as sample_classes), then fully shuffles the entry
/// positions of each remaining class in ascending class order; the first
/// train_count positions go to train. Every output keeps manifest order and
/// carries its split tag.
inline Splits make_splits(const Manifest& m, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0))
    throw DomainError("make_splits: train_fraction must lie in (0, 1]");
  const auto groups = detail::group_by_class(m, "make_splits");
  if (spec.zeroshot_class_count >= groups.size())
    throw DomainError("make_splits: " + std::to_string(groups.size()) + " classes cannot supply " +
                      std::to_string(spec.zeroshot_class_count) + " zero-shot classes plus training classes");

  SplitMix64 rng(spec.seed);
  std::vector<std::uint32_t> classes;
  for (const auto& g : groups) classes.push_back(g.first);
  const auto zs_list = choose_classes(classes, spec.zeroshot_class_count, rng);
  const std::unordered_set<std::uint32_t> zeroshot(zs_list.begin(), zs_list.end());

  std::vector<Split> assign(m.entries.size(), Split::test);
  for (auto [cls, idx] : groups) {
    if (zeroshot.contains(cls)) continue;
    shuffle<std::size_t>(idx, rng);
    const auto n_train = train_count(spec.train_fraction, idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) assign[idx[j]] = j < n_train ? Split::train : Split::val;
  }

  Splits out;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    auto e = m.entries[i];
    e.split = assign[i];
    switch (assign[i]) {
      case Split::train: out.train.entries.push_back(std::move(e)); break;
      case Split::val: out.val.entries.push_back(std::move(e)); break;
      case Split::test: out.zeroshot_test.entries.push_back(std::move(e)); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticSet {
  FeatureStore store;
  Manifest manifest;
};

inline constexpr std::array<std::uint16_t, 3> kSyntheticSides = {224, 336, 448};

/// Gaussian class clusters for desk-scale runs.
///
/// Draw order from one generator: all class centers (class-major,
/// separation * N(0,1) per component), then one category per class from
/// {apparel, packaged, toy, other}, then per record (class-major) width,
/// height from {224, 336, 448} and dim unit-variance noise components.
/// Ids are "syn-CCCCC-IIIII" so lexicographic order is class-major.
inline SyntheticSet gen_synthetic(std::uint32_t n_classes, std::uint32_t per_class, std::uint32_t dim,
                                  double separation, std::uint64_t seed) {
  if (n_classes == 0 || per_class == 0 || dim == 0)
    throw DomainError("gen_synthetic: counts must be positive");
  if (!(separation >= 0.0) || !std::isfinite(separation))
    throw DomainError("gen_synthetic: separation must be finite and nonnegative");
  SplitMix64 rng(seed);
  std::vector<double> centers(static_cast<std::size_t>(n_classes) * dim);
  for (auto& c : centers) c = separation * rng.normal();
  std::vector<Category> cats(n_classes);
  for (auto& c : cats) c = static_cast<Category>(1 + rng.below(4));

  SyntheticSet out{FeatureStore(dim), {}};
  char id[32];
  for (std::uint32_t k = 0; k < n_classes; ++k) {
    for (std::uint32_t i = 0; i < per_class; ++i) {
      FeatureRecord r;
      std::snprintf(id, sizeof(id), "syn-%05u-%05u", k, i);
      r.image_id = id;
      r.class_id = k;
      r.width = kSyntheticSides[rng.below(3)];
      r.height = kSyntheticSides[rng.below(3)];
      r.category = cats[k];
      r.feature.resize(dim);
      for (std::uint32_t d = 0; d < dim; ++d)
        r.feature[d] = static_cast<float>(centers[static_cast<std::size_t>(k) * dim + d] + rng.normal());
      out.manifest.entries.push_back(
          {r.image_id, r.class_id, "synthetic", r.width, r.height, r.category, std::nullopt});
      out.store.add(std::move(r));
    }
  }
  return out;
}

}  // namespace guie
