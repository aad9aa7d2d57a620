#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "certsmooth/map.hpp"

namespace certsmooth {

// Checkpoint document for a leaf map:
//   {kind, input_shape, output_shape, seed, parameters: [...], config: {...}}
// Doubles are written in shortest round-trip form, so load(save(m)) restores
// the parameters bit for bit.
inline nlohmann::json to_checkpoint(const DifferentiableMap& map) {
  nlohmann::json doc;
  doc["kind"] = std::string(kind_name(map.kind()));
  doc["input_shape"] = map.input_shape();
  doc["output_shape"] = map.output_shape();
  doc["seed"] = map.seed();
  nlohmann::json config = nlohmann::json::object();
  if (const auto* mlp = dynamic_cast<const MlpScorer*>(&map)) {
    config["hidden"] = mlp->hidden();
  } else if (const auto* bb = dynamic_cast<const ToyBackbone*>(&map)) {
    config["conv_channels"] = bb->conv_channels();
  } else if (map.kind() == MapKind::composition || map.kind() == MapKind::pair_adapter) {
    throw InvalidInput("checkpoint: only leaf maps are serializable, got " + std::string(kind_name(map.kind())));
  }
  doc["config"] = config;
  doc["parameters"] = std::vector<double>(map.parameters().begin(), map.parameters().end());
  return doc;
}

inline MapPtr from_checkpoint(const nlohmann::json& doc) {
  try {
    const MapKind kind = parse_kind(doc.at("kind").get<std::string>());
    const auto input_shape = doc.at("input_shape").get<Shape>();
    const auto output_shape = doc.at("output_shape").get<Shape>();
    const auto seed = doc.at("seed").get<std::uint64_t>();
    const auto params = doc.at("parameters").get<std::vector<double>>();
    const nlohmann::json config = doc.value("config", nlohmann::json::object());
    MapPtr map;
    switch (kind) {
      case MapKind::linear:
        map = std::make_shared<LinearMap>(input_shape, output_shape, seed);
        break;
      case MapKind::affine_sigmoid:
        detail::require(input_shape.size() == 1 && output_shape.size() == 1, "affine_sigmoid expects 1-D shapes");
        map = std::make_shared<AffineSigmoidMap>(input_shape[0], output_shape[0], seed);
        break;
      case MapKind::toy_backbone:
        detail::require(output_shape.size() == 1, "toy_backbone expects a 1-D output shape");
        map = std::make_shared<ToyBackbone>(input_shape, seed,
                                            config.value("conv_channels", ToyBackbone::kDefaultConvChannels),
                                            output_shape[0]);
        break;
      case MapKind::mlp_scorer:
        detail::require(input_shape.size() == 1, "mlp_scorer expects a 1-D input shape");
        map = std::make_shared<MlpScorer>(input_shape[0], config.at("hidden").get<std::vector<std::size_t>>(), seed);
        break;
      default:
        throw InvalidInput("checkpoint: kind " + std::string(kind_name(kind)) + " is not a leaf map");
    }
    if (map->output_shape() != output_shape) throw InvalidInput("checkpoint: output shape inconsistent with kind");
    map->set_parameters(params);
    return map;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const DifferentiableMap& map, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << to_checkpoint(map).dump(1) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline MapPtr load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("cannot parse " + path.string() + ": " + e.what());
  }
  return from_checkpoint(doc);
}

// FNV-1a over the raw parameter bytes; equal checksums mean equal bit patterns.
inline std::uint64_t parameter_checksum(std::span<const double> params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : params) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFFU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace certsmooth
