#pragma once

// TMAW weight files and their JSON sidecar (variant, dims, vocabulary).

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tma/data.hpp"
#include "tma/model.hpp"

namespace tma {

inline constexpr std::array<char, 4> kWeightMagic{'T', 'M', 'A', 'W'};
inline constexpr std::uint16_t kWeightVersion = 1;

inline std::string encode_weights(const std::map<std::string, Tensor>& tensors) {
  std::string out(kWeightMagic.begin(), kWeightMagic.end());
  detail::put_le(out, kWeightVersion);
  detail::put_le(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {  // std::map iterates in name order
    if (name.size() > 0xFFFF) throw std::invalid_argument("weights: parameter name too long");
    detail::put_le(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) detail::put_le(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline std::map<std::string, Tensor> decode_weights(std::string_view bytes,
                                                    const std::string& what = "weights") {
  if (bytes.size() < 4 || !std::equal(kWeightMagic.begin(), kWeightMagic.end(), bytes.begin()))
    throw FormatError(what + ": bad magic (expected TMAW)");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint16_t>(bytes, pos, what);
  if (version != kWeightVersion)
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(bytes, pos, what);
  std::map<std::string, Tensor> out;
  std::string prev;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = detail::get_le<std::uint16_t>(bytes, pos, what);
    if (bytes.size() - pos < len) throw FormatError(what + ": truncated file");
    std::string name(bytes.substr(pos, len));
    pos += len;
    if (k > 0 && !(prev < name))
      throw FormatError(what + ": entries not sorted by name at '" + name + "'");
    const auto rank = detail::get_le<std::uint8_t>(bytes, pos, what);
    Shape shape;
    for (std::uint8_t r = 0; r < rank; ++r)
      shape.push_back(detail::get_le<std::uint32_t>(bytes, pos, what));
    const std::size_t n = shape_size(shape);
    if ((bytes.size() - pos) / 8 < n) throw FormatError(what + ": truncated payload of '" + name + "'");
    std::vector<double> data(n);
    for (double& v : data) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, pos, what));
    out.emplace(name, Tensor(std::move(shape), std::move(data)));
    prev = std::move(name);
  }
  if (pos != bytes.size()) throw FormatError(what + ": trailing bytes");
  return out;
}

inline nlohmann::json dims_to_json(const ModelDims& d) {
  return {{"feature_dim", d.feature_dim}, {"embed", d.embed},   {"encoder", d.encoder},
          {"decoder", d.decoder},         {"align", d.align},   {"output", d.output},
          {"tanh_on_cell_output", d.tanh_on_cell_output}};
}

inline ModelDims dims_from_json(const nlohmann::json& j) {
  ModelDims d;
  d.feature_dim = j.at("feature_dim").get<std::size_t>();
  d.embed = j.at("embed").get<std::size_t>();
  d.encoder = j.at("encoder").get<std::size_t>();
  d.decoder = j.at("decoder").get<std::size_t>();
  d.align = j.at("align").get<std::size_t>();
  d.output = j.at("output").get<std::size_t>();
  d.tanh_on_cell_output = j.value("tanh_on_cell_output", false);
  return d;
}

/// A trained model together with the vocabulary its indices refer to.
struct SavedModel {
  ModelParams params;
  Vocabulary vocab;
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& weights) {
  return weights.string() + ".json";
}

inline void save_model(const std::filesystem::path& path, const ModelParams& p,
                       const Vocabulary& vocab) {
  if (vocab.size() != p.vocab_size)
    throw std::invalid_argument("save_model: vocabulary size does not match the model");
  detail::write_file(path, encode_weights(p.tensors));
  const nlohmann::json side{{"variant", to_string(p.variant)},
                            {"dims", dims_to_json(p.dims)},
                            {"vocab", vocab.tokens()}};
  detail::write_file(sidecar_path(path), side.dump(2) + "\n");
}

/// Loads weights and sidecar and checks the tensor set against the variant.
inline SavedModel load_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("model file '" + path.string() + "' not found");
  const auto side_path = sidecar_path(path);
  if (!std::filesystem::exists(side_path))
    throw DataError("model sidecar '" + side_path.string() + "' not found");
  SavedModel m;
  try {
    const auto side = nlohmann::json::parse(detail::read_file(side_path));
    m.params.variant = parse_variant(side.at("variant").get<std::string>());
    m.params.dims = dims_from_json(side.at("dims"));
    m.vocab = Vocabulary::from_tokens(side.at("vocab").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("model sidecar '" + side_path.string() + "': " + ex.what());
  }
  m.params.vocab_size = m.vocab.size();
  m.params.tensors = decode_weights(detail::read_file(path), path.string());
  const auto expected = detail::parameter_shapes(m.params.variant, m.params.dims, m.params.vocab_size);
  if (expected.size() != m.params.tensors.size())
    throw DataError(path.string() + ": expected " + std::to_string(expected.size()) +
                    " tensors for variant " + to_string(m.params.variant) + ", found " +
                    std::to_string(m.params.tensors.size()));
  for (const auto& e : expected) {
    auto it = m.params.tensors.find(e.name);
    if (it == m.params.tensors.end())
      throw DataError(path.string() + ": missing tensor '" + e.name + "'");
    if (it->second.shape() != e.shape)
      throw DataError(path.string() + ": tensor '" + e.name + "' has shape " +
                      shape_string(it->second.shape()) + ", expected " + shape_string(e.shape));
  }
  return m;
}

}  // namespace tma
