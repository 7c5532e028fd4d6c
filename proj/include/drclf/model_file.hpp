// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "drclf/binary_io.hpp"
#include "drclf/error.hpp"
#include "drclf/optimizer.hpp"

namespace drclf {

// .mlpmodel layout, little-endian:
//   "MLPM", version u32 = 1, dim count u32, dims u32..., dropout_rate f32,
//   per layer: W (row-major), b, and for hidden layers scale, shift,
//   running mean, running variance (all f32),
//   then u32 byte length + UTF-8 JSON {config, feature_dim, history}.

inline constexpr char kModelMagic[4] = {'M', 'L', 'P', 'M'};
inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

template <typename Tensor>
void put_tensor(ByteWriter& w, const Tensor& t) {
  for (Eigen::Index r = 0; r < t.rows(); ++r) {
    for (Eigen::Index c = 0; c < t.cols(); ++c) w.f32(t(r, c));
  }
}

template <typename Tensor>
void get_tensor(ByteReader& in, Tensor& t, const char* what) {
  for (Eigen::Index r = 0; r < t.rows(); ++r) {
    for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = in.f32(what);
  }
}

}  // namespace detail

inline std::vector<unsigned char> encode_model(const TrainedModel& model) {
  model.params.validate();
  detail::ByteWriter w;
  w.bytes(kModelMagic, 4);
  w.u32(kModelVersion);
  const auto& dims = model.params.dims;
  w.u32(static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) w.u32(static_cast<std::uint32_t>(d));
  w.f32(static_cast<float>(model.config.dropout_rate));
  for (std::size_t l = 0; l < model.params.weights.layers.size(); ++l) {
    const auto& t = model.params.weights.layers[l];
    detail::put_tensor(w, t.weight);
    detail::put_tensor(w, t.bias);
    if (l < model.params.hidden_layers()) {
      detail::put_tensor(w, t.scale);
      detail::put_tensor(w, t.shift);
      detail::put_tensor(w, model.params.running[l].mean);
      detail::put_tensor(w, model.params.running[l].var);
    }
  }
  nlohmann::json footer{{"config", model.config}, {"feature_dim", model.feature_dim}, {"history", model.history}};
  const std::string text = footer.dump();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  return w.take();
}

inline TrainedModel decode_model(std::span<const unsigned char> data) {
  detail::ByteReader in(data);
  auto magic = in.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kModelMagic)) fail(ErrorKind::BadMagic, "expected \"MLPM\" at offset 0");
  const auto version = in.u32("version");
  if (version != kModelVersion) {
    fail(ErrorKind::UnsupportedVersion, "model version " + std::to_string(version) + " at offset 4");
  }
  const auto count = in.u32("dim count");
  require(count >= 2 && count <= 64, ErrorKind::InvalidArgument, "implausible layer count " + std::to_string(count));
  std::vector<std::size_t> dims(count);
  for (auto& d : dims) {
    d = in.u32("dim");
    require(d > 0 && d <= (1u << 20), ErrorKind::InvalidArgument, "implausible layer width " + std::to_string(d));
  }
  require(dims.back() == 1, ErrorKind::InvalidArgument, "output width must be 1");
  const float dropout = in.f32("dropout_rate");

  TrainedModel model;
  model.params = init_params<float>(dims, 0);
  for (std::size_t l = 0; l < model.params.weights.layers.size(); ++l) {
    auto& t = model.params.weights.layers[l];
    detail::get_tensor(in, t.weight, "weights");
    detail::get_tensor(in, t.bias, "bias");
    if (l < model.params.hidden_layers()) {
      detail::get_tensor(in, t.scale, "batch-norm scale");
      detail::get_tensor(in, t.shift, "batch-norm shift");
      detail::get_tensor(in, model.params.running[l].mean, "running mean");
      detail::get_tensor(in, model.params.running[l].var, "running variance");
    }
  }
  model.params.validate();

  const auto length = in.u32("footer length");
  const auto text = in.bytes(length, "footer");
  try {
    const auto footer = nlohmann::json::parse(text.begin(), text.end());
    model.config = footer.at("config").get<TrainConfig>();
    model.feature_dim = footer.at("feature_dim").get<std::uint32_t>();
    model.history = footer.at("history").get<std::vector<EpochStats>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidArgument, std::string("bad model footer: ") + e.what());
  }
  require(static_cast<float>(model.config.dropout_rate) == dropout, ErrorKind::InvalidArgument,
          "header dropout rate disagrees with the footer config");
  require(model.feature_dim == dims.front(), ErrorKind::DimensionMismatch, "footer feature_dim disagrees with dims");
  require(in.remaining() == 0, ErrorKind::InvalidArgument,
          std::to_string(in.remaining()) + " trailing bytes at offset " + std::to_string(in.offset()));
  return model;
}

inline void write_model(const TrainedModel& model, const std::filesystem::path& path) {
  detail::write_file(path, encode_model(model));
}

inline TrainedModel read_model(const std::filesystem::path& path) { return decode_model(detail::read_file(path)); }

}  // namespace drclf
