#pragma once

// Inference-time geometry: pad-to-square, bicubic antialias resampling,
// center crops, and the test-time-augmentation plan table.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "guie/error.hpp"
#include "guie/features.hpp"
#include "guie/tensor.hpp"

namespace guie {

struct PixelSize {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  bool operator==(const PixelSize&) const = default;
};

struct PadBox {
  std::uint32_t left = 0, top = 0, right = 0, bottom = 0;
  bool operator==(const PadBox&) const = default;
};

struct CropRect {
  std::uint32_t x = 0, y = 0, width = 0, height = 0;
  bool operator==(const CropRect&) const = default;
};

/// Centered zero padding to a max(w, h) square; odd deficits put the extra
/// pixel on the right / bottom.
inline PadBox pad_to_square_plan(std::uint32_t w, std::uint32_t h) {
  if (w == 0 || h == 0) throw DomainError("pad_to_square_plan: zero pixel dimension");
  const auto side = std::max(w, h);
  PadBox p;
  p.left = (side - w) / 2;
  p.right = side - w - p.left;
  p.top = (side - h) / 2;
  p.bottom = side - h - p.top;
  return p;
}

/// round(w f) x round(h f) centered, offsets floored. Halves round to even.
inline CropRect center_crop_plan(std::uint32_t w, std::uint32_t h, double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
    throw DomainError("center_crop_plan: keep_fraction must lie in (0, 1]");
  const auto cw = static_cast<std::uint32_t>(std::nearbyint(static_cast<double>(w) * keep_fraction));
  const auto ch = static_cast<std::uint32_t>(std::nearbyint(static_cast<double>(h) * keep_fraction));
  if (cw == 0 || ch == 0) throw DomainError("center_crop_plan: crop rounds to zero pixels");
  return {(w - cw) / 2, (h - ch) / 2, cw, ch};
}

// ---------------------------------------------------------------------------
// Bicubic resampling

inline constexpr double kCubicA = -0.5;

/// Keys cubic convolution kernel with a = −0.5.
inline double cubic_kernel(double x) {
  x = std::abs(x);
  constexpr double a = kCubicA;
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

struct ResampleTaps {
  std::vector<std::int64_t> first;   // first source index per output (before clamping)
  std::vector<std::vector<double>> weights;  // normalized
};

/// One-axis taps. Output pixel i maps to source center (i + ½)·in/out − ½;
/// when downscaling with antialias the kernel is stretched by in/out.
inline ResampleTaps resample_taps(std::uint32_t in, std::uint32_t out, bool antialias) {
  ResampleTaps t;
  t.first.resize(out);
  t.weights.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double stretch = antialias && scale > 1.0 ? scale : 1.0;
  const double radius = 2.0 * stretch;
  for (std::uint32_t i = 0; i < out; ++i) {
    const double center = (static_cast<double>(i) + 0.5) * scale - 0.5;
    const auto lo = static_cast<std::int64_t>(std::floor(center - radius)) + 1;
    const auto hi = static_cast<std::int64_t>(std::ceil(center + radius)) - 1;
    auto& w = t.weights[i];
    double sum = 0.0;
    for (auto j = lo; j <= hi; ++j) {
      w.push_back(cubic_kernel((static_cast<double>(j) - center) / stretch));
      sum += w.back();
    }
    for (auto& v : w) v /= sum;
    t.first[i] = lo;
  }
  return t;
}

/// Separable bicubic resize of a single-channel image [rows = height].
/// Edges clamp. Output is th x tw.
template <class T>
Matrix<T> resize_bicubic(const Matrix<T>& img, std::uint32_t tw, std::uint32_t th, bool antialias = true) {
  if (img.rows() < 1 || img.cols() < 1 || tw < 1 || th < 1) throw DomainError("resize_bicubic: empty image");
  const auto h = static_cast<std::uint32_t>(img.rows());
  const auto w = static_cast<std::uint32_t>(img.cols());
  const auto clampi = [](std::int64_t j, std::uint32_t n) {
    return static_cast<Eigen::Index>(std::clamp<std::int64_t>(j, 0, static_cast<std::int64_t>(n) - 1));
  };

  const auto tx = resample_taps(w, tw, antialias);
  Matrix<double> horiz(h, tw);
  for (std::uint32_t r = 0; r < h; ++r)
    for (std::uint32_t c = 0; c < tw; ++c) {
      double acc = 0.0;
      const auto& wt = tx.weights[c];
      for (std::size_t k = 0; k < wt.size(); ++k)
        acc += wt[k] * static_cast<double>(img(r, clampi(tx.first[c] + static_cast<std::int64_t>(k), w)));
      horiz(r, c) = acc;
    }

  const auto ty = resample_taps(h, th, antialias);
  Matrix<T> out(th, tw);
  for (std::uint32_t r = 0; r < th; ++r) {
    const auto& wt = ty.weights[r];
    for (std::uint32_t c = 0; c < tw; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < wt.size(); ++k)
        acc += wt[k] * horiz(clampi(ty.first[r] + static_cast<std::int64_t>(k), h), c);
      out(r, c) = static_cast<T>(acc);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// TTA plans

enum class VariantTag : std::uint8_t { base, center_crop, stretch, tight_crop };

inline std::string_view to_string(VariantTag v) {
  switch (v) {
    case VariantTag::center_crop: return "center_crop";
    case VariantTag::stretch: return "stretch";
    case VariantTag::tight_crop: return "tight_crop";
    case VariantTag::base: break;
  }
  return "base";
}

inline std::optional<VariantTag> parse_variant(std::string_view s) {
  if (s == "base") return VariantTag::base;
  if (s == "center_crop") return VariantTag::center_crop;
  if (s == "stretch") return VariantTag::stretch;
  if (s == "tight_crop") return VariantTag::tight_crop;
  return std::nullopt;
}

inline constexpr std::string_view kInterpolation = "bicubic-antialias";
inline constexpr float kPadFill = 0.0f;

struct TransformPlan {
  PixelSize source;
  PadBox pad;
  CropRect crop;  // in padded-canvas coordinates
  PixelSize target{224, 224};
  VariantTag variant = VariantTag::base;

  PixelSize canvas() const {
    return {source.width + pad.left + pad.right, source.height + pad.top + pad.bottom};
  }

  bool crop_inside_canvas() const {
    const auto c = canvas();
    return crop.width >= 1 && crop.height >= 1 && crop.x + crop.width <= c.width &&
           crop.y + crop.height <= c.height;
  }

  bool operator==(const TransformPlan&) const = default;
};

struct TtaPolicy {
  double keep_fraction = 0.9;
  std::array<Category, 3> priority_categories{Category::apparel, Category::packaged, Category::toy};
  double square_tolerance = 0.0;
  PixelSize target{224, 224};

  void validate() const {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ConfigError("keep_fraction must lie in (0, 1]");
    if (!(square_tolerance >= 0.0)) throw ConfigError("square_tolerance must be >= 0");
    if (target.width == 0 || target.height == 0) throw ConfigError("target size must be positive");
  }

  bool is_priority(Category c) const {
    return std::find(priority_categories.begin(), priority_categories.end(), c) != priority_categories.end();
  }

  bool is_square(std::uint32_t w, std::uint32_t h) const {
    const auto diff = static_cast<double>(w > h ? w - h : h - w);
    return diff / static_cast<double>(std::max(w, h)) <= square_tolerance;
  }
};

namespace detail {

// Like center_crop_plan but never below one pixel, for canvases too small
// to crop meaningfully.
inline CropRect center_crop_at_least_one(std::uint32_t w, std::uint32_t h, double f) {
  const auto cw = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(std::nearbyint(w * f)));
  const auto ch = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(std::nearbyint(h * f)));
  return {(w - cw) / 2, (h - ch) / 2, cw, ch};
}

}  // namespace detail

/// Plan table:
///   square, non-priority      -> [base]
///   non-square, non-priority  -> [base, center_crop]
///   priority category         -> [base, center_crop, stretch, tight_crop]
/// base pads to square and resizes; center_crop keeps keep_fraction of the
/// padded square; stretch resizes the unpadded image; tight_crop keeps
/// keep_fraction² of the padded square.
inline std::vector<TransformPlan> tta_variants(std::uint32_t w, std::uint32_t h, Category category,
                                               const TtaPolicy& policy = {}) {
  policy.validate();
  if (w == 0 || h == 0) throw DomainError("tta_variants: zero pixel dimension");
  const PixelSize src{w, h};
  const auto pad = pad_to_square_plan(w, h);
  const auto side = std::max(w, h);

  std::vector<TransformPlan> plans;
  plans.push_back({src, pad, {0, 0, side, side}, policy.target, VariantTag::base});
  const bool priority = policy.is_priority(category);
  if (!priority && policy.is_square(w, h)) return plans;

  const double f = policy.keep_fraction;
  plans.push_back({src, pad, detail::center_crop_at_least_one(side, side, f), policy.target, VariantTag::center_crop});
  if (!priority) return plans;
  plans.push_back({src, {}, {0, 0, w, h}, policy.target, VariantTag::stretch});
  plans.push_back({src, pad, detail::center_crop_at_least_one(side, side, f * f), policy.target, VariantTag::tight_crop});
  return plans;
}

/// Executes a plan on a single-channel image: zero pad, crop, resize.
template <class T>
Matrix<T> apply_plan(const Matrix<T>& img, const TransformPlan& plan) {
  if (static_cast<std::uint32_t>(img.cols()) != plan.source.width ||
      static_cast<std::uint32_t>(img.rows()) != plan.source.height)
    throw DomainError("apply_plan: image size differs from plan source");
  if (!plan.crop_inside_canvas()) throw DomainError("apply_plan: crop outside canvas");
  const auto c = plan.canvas();
  Matrix<T> canvas = Matrix<T>::Constant(c.height, c.width, static_cast<T>(kPadFill));
  canvas.block(plan.pad.top, plan.pad.left, img.rows(), img.cols()) = img;
  const Matrix<T> cropped = canvas.block(plan.crop.y, plan.crop.x, plan.crop.height, plan.crop.width);
  return resize_bicubic(cropped, plan.target.width, plan.target.height, true);
}

inline nlohmann::ordered_json to_json(const TransformPlan& p, std::string_view image_id) {
  nlohmann::ordered_json j;
  j["image_id"] = image_id;
  j["variant_tag"] = to_string(p.variant);
  j["source"] = {{"width", p.source.width}, {"height", p.source.height}};
  j["pad"] = {{"left", p.pad.left}, {"top", p.pad.top}, {"right", p.pad.right}, {"bottom", p.pad.bottom}};
  j["pad_fill"] = 0;
  j["crop"] = {{"x", p.crop.x}, {"y", p.crop.y}, {"width", p.crop.width}, {"height", p.crop.height}};
  j["target"] = {{"width", p.target.width}, {"height", p.target.height}};
  j["interpolation"] = kInterpolation;
  return j;
}

// Per-variant features come back keyed "<image_id>#<variant_tag>".
inline constexpr char kVariantSeparator = '#';

inline std::string variant_key(std::string_view image_id, VariantTag v) {
  std::string k(image_id);
  k += kVariantSeparator;
  k += to_string(v);
  return k;
}

/// Splits "<id>#<tag>" when the suffix is a known tag; otherwise the whole
/// key is the image id.
inline std::pair<std::string, std::optional<VariantTag>> split_variant_key(std::string_view key) {
  const auto pos = key.rfind(kVariantSeparator);
  if (pos != std::string_view::npos && pos > 0)
    if (auto v = parse_variant(key.substr(pos + 1))) return {std::string(key.substr(0, pos)), v};
  return {std::string(key), std::nullopt};
}

/// Componentwise mean of unit vectors, renormalized.
template <class T>
RowVector<T> aggregate_embeddings(const std::vector<RowVector<T>>& es) {
  if (es.empty()) throw DomainError("aggregate_embeddings: empty list");
  const auto d = es.front().size();
  RowVector<double> mean = RowVector<double>::Zero(d);
  for (const auto& e : es) {
    if (e.size() != d) throw DomainError("aggregate_embeddings: mixed widths");
    const double n = e.template cast<double>().norm();
    if (std::abs(n - 1.0) > 1e-4) throw DomainError("aggregate_embeddings: input is not unit-norm");
    mean += e.template cast<double>();
  }
  mean /= static_cast<double>(es.size());
  const double norm = mean.norm();
  if (norm < 1e-9) throw DomainError("degenerate aggregate: mean embedding has zero norm");
  return (mean / norm).template cast<T>();
}

}  // namespace guie
