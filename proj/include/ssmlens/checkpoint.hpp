// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container, little-endian:
//   "SSML" | u32 version | u32 json_len | config json |
//   tensors in lexicographic name order, each
//   u16 name_len | name | u8 rank | u32 dims... | f32 payload
//
// Payloads are stored as f32. Save/load round-trips are byte-exact for the
// f32 model.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssmlens/model.hpp"
#include "ssmlens/tensor.hpp"

namespace ssmlens {

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, bad_version, truncated, inconsistent };

  CheckpointError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"d_model", c.d_model},       {"n_layers", c.n_layers},
                        {"d_state", c.d_state},       {"d_conv", c.d_conv},
                        {"dt_rank", c.dt_rank},       {"vocab_size", c.vocab_size},
                        {"max_seq_len", c.max_seq_len}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.d_state = j.at("d_state").get<int>();
  c.d_conv = j.at("d_conv").get<int>();
  c.dt_rank = j.at("dt_rank").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.validate();
  return c;
}

template <typename V>
void write_pod(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
  return v;
}

}  // namespace detail

constexpr char kCheckpointMagic[4] = {'S', 'S', 'M', 'L'};
constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const MambaLMT<T>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path);

  os.write(kCheckpointMagic, 4);
  detail::write_pod(os, kCheckpointVersion);
  const std::string cfg = detail::config_to_json(model.config).dump();
  detail::write_pod(os, static_cast<uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  auto named = model.named_tensors();
  std::sort(named.begin(), named.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [name, tensor] : named) {
    detail::write_pod(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(os, static_cast<uint8_t>(tensor->rank()));
    for (int i = 0; i < tensor->rank(); ++i) {
      detail::write_pod(os, static_cast<uint32_t>(tensor->dim(i)));
    }
    for (size_t i = 0; i < tensor->numel(); ++i) {
      detail::write_pod(os, static_cast<float>((*tensor)[i]));
    }
  }
  if (!os) throw CheckpointError(CheckpointError::Kind::io, "write failed for " + path);
}

template <typename T = float>
MambaLMT<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path);

  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::bad_magic, "bad magic in " + path);
  }
  const auto version = detail::read_pod<uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::bad_version,
                          "unsupported checkpoint version " + std::to_string(version));
  }
  const auto json_len = detail::read_pod<uint32_t>(is);
  std::string cfg_text(json_len, '\0');
  is.read(cfg_text.data(), json_len);
  if (!is) throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");

  ModelConfig config;
  try {
    config = detail::config_from_json(nlohmann::json::parse(cfg_text));
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::inconsistent,
                          std::string("bad config record: ") + e.what());
  }

  // Zero-initialized skeleton with the right shapes, filled from the file.
  MambaLMT<T> model = init_params<T>(config, 0);
  for (auto& [name, tensor] : model.named_tensors()) {
    *tensor = TensorT<T>(tensor->shape());
  }

  std::map<std::string, TensorT<T>*> expect;
  for (auto& [name, tensor] : model.named_tensors()) expect[name] = tensor;

  std::map<std::string, bool> seen;
  while (is.peek() != EOF) {
    const auto name_len = detail::read_pod<uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
    const auto rank = detail::read_pod<uint8_t>(is);
    std::vector<int> dims(rank);
    for (auto& d : dims) d = static_cast<int>(detail::read_pod<uint32_t>(is));

    auto it = expect.find(name);
    if (it == expect.end()) {
      throw CheckpointError(CheckpointError::Kind::inconsistent,
                            "unexpected tensor '" + name + "' for this config");
    }
    if (dims != it->second->shape()) {
      throw CheckpointError(CheckpointError::Kind::inconsistent,
                            "tensor '" + name + "' has shape " + shape_str(dims) +
                                ", config requires " + shape_str(it->second->shape()));
    }
    for (size_t i = 0; i < it->second->numel(); ++i) {
      (*it->second)[i] = static_cast<T>(detail::read_pod<float>(is));
    }
    seen[name] = true;
  }
  if (seen.size() != expect.size()) {
    throw CheckpointError(CheckpointError::Kind::inconsistent,
                          "checkpoint is missing tensors for this config");
  }
  return model;
}

}  // namespace ssmlens
