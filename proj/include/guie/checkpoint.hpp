#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "guie/byte_io.hpp"
#include "guie/error.hpp"
#include "guie/head.hpp"

namespace guie {

/// Trained head plus everything needed to embed with it.
struct Checkpoint {
  HeadParams<float> params;
  BatchNormState<float> bn;
  ArcFaceConfig arcface;
  std::vector<std::uint32_t> class_ids;  // row j of the class weights is class_ids[j]
  std::uint32_t epoch = 0;               // 1-based epoch the weights were taken after
  double zeroshot_map5 = 0.0;
  std::string config_json;

  BatchNormState<float> eval_bn() const {
    auto s = bn;
    s.mode = NormMode::eval;
    return s;
  }
};

inline constexpr std::string_view kCheckpointMagic = "GUIEHEAD";
inline constexpr std::uint16_t kCheckpointVersion = 1;

/// GUIEHEAD layout, little-endian:
///   magic[8] version:u16 d_in:u32 d_out:u32 n_classes:u32
///   scale:f64 margin:f64 bn_momentum:f32 bn_epsilon:f32 epoch:u32 map5:f64
///   class_ids:u32[n_classes]
///   proj_weight:f32[d_out*d_in] (row-major) proj_bias:f32[d_out]
///   class_weight:f32[n_classes*d_out] (row-major)
///   running_mean:f32[d_in] running_var:f32[d_in]
///   config_len:u32 config_json[config_len]
inline std::string write_checkpoint(const Checkpoint& c) {
  const auto d_in = static_cast<std::uint32_t>(c.params.d_in());
  const auto d_out = static_cast<std::uint32_t>(c.params.d_out());
  const auto n = static_cast<std::uint32_t>(c.params.n_classes());
  if (c.class_ids.size() != n) throw FormatError("checkpoint: class id table does not match class weights");
  if (c.bn.dim() != d_in) throw FormatError("checkpoint: batchnorm width does not match projection");
  if (c.params.proj_bias().cols() != d_out) throw FormatError("checkpoint: bias width does not match projection");

  ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u16(kCheckpointVersion);
  w.u32(d_in);
  w.u32(d_out);
  w.u32(n);
  w.f64(c.arcface.scale);
  w.f64(c.arcface.margin);
  w.f32(c.bn.momentum);
  w.f32(c.bn.epsilon);
  w.u32(c.epoch);
  w.f64(c.zeroshot_map5);
  for (auto id : c.class_ids) w.u32(id);
  const auto put = [&](const auto& m) { w.f32s(std::span<const float>(m.data(), static_cast<std::size_t>(m.size()))); };
  put(c.params.proj_weight());
  put(c.params.proj_bias());
  put(c.params.class_weight());
  put(c.bn.running_mean);
  put(c.bn.running_var);
  w.u32(static_cast<std::uint32_t>(c.config_json.size()));
  w.bytes(c.config_json);
  return std::move(w).take();
}

inline Checkpoint read_checkpoint(std::string_view bytes) {
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw FormatError("bad magic: not a GUIEHEAD checkpoint");
  ByteReader in(bytes);
  in.bytes(kCheckpointMagic.size(), "magic");
  const auto version = in.u16("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported GUIEHEAD version " + std::to_string(version));
  const auto d_in = in.u32("d_in");
  const auto d_out = in.u32("d_out");
  const auto n = in.u32("n_classes");
  if (d_in == 0 || d_out == 0 || n == 0) throw FormatError("checkpoint: zero dimension");
  const std::uint64_t floats = std::uint64_t(d_out) * d_in + d_out + std::uint64_t(n) * d_out + 2ull * d_in;
  if (floats * 4 + 4ull * n > in.remaining()) throw FormatError("checkpoint: truncated tensors");

  Checkpoint c;
  c.arcface.scale = in.f64("scale");
  c.arcface.margin = in.f64("margin");
  c.bn.momentum = in.f32("bn momentum");
  c.bn.epsilon = in.f32("bn epsilon");
  c.bn.mode = NormMode::eval;
  c.epoch = in.u32("epoch");
  c.zeroshot_map5 = in.f64("map5");
  c.class_ids.resize(n);
  for (auto& id : c.class_ids) id = in.u32("class ids");
  c.params.tensors = {Matrix<float>(d_out, d_in), Matrix<float>(1, d_out), Matrix<float>(n, d_out)};
  c.bn.running_mean.resize(d_in);
  c.bn.running_var.resize(d_in);
  const auto get = [&](auto& m, const char* what) {
    in.f32s(std::span<float>(m.data(), static_cast<std::size_t>(m.size())), what);
  };
  get(c.params.proj_weight(), "projection weight");
  get(c.params.proj_bias(), "projection bias");
  get(c.params.class_weight(), "class weight");
  get(c.bn.running_mean, "running mean");
  get(c.bn.running_var, "running variance");
  const auto len = in.u32("config length");
  c.config_json = std::string(in.bytes(len, "config json"));
  if (in.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return c;
}

}  // namespace guie
