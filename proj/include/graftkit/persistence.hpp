#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "graftkit/diffusion.hpp"
#include "graftkit/graft.hpp"
#include "graftkit/model.hpp"
#include "graftkit/tensor.hpp"

namespace graftkit {

using json = nlohmann::json;

inline constexpr std::uint32_t kFormatVersion = 1;

class PersistenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public PersistenceError {
 public:
  using PersistenceError::PersistenceError;
};
class FormatVersionError : public PersistenceError {
 public:
  using PersistenceError::PersistenceError;
};
class HashMismatchError : public PersistenceError {
 public:
  using PersistenceError::PersistenceError;
};
class TruncatedFileError : public PersistenceError {
 public:
  using PersistenceError::PersistenceError;
};
class ArtifactKindError : public PersistenceError {
 public:
  using PersistenceError::PersistenceError;
};

// Schema violations in JSON configs and manifests; `path` is the offending key
// path, e.g. "model.depth".
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string path, const std::string& what)
      : std::invalid_argument(path.empty() ? what : path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// Strict reader over one JSON object: every key must be consumed, and every
// error names the full key path.
class JsonReader {
 public:
  JsonReader(const json& j, std::string path);

  bool has(std::string_view key) const;
  // Value at `key` converted to T; absent keys return `fallback`.
  template <class T>
  T get(std::string_view key, const T& fallback);
  template <class T>
  T require(std::string_view key);
  // Nested object (or null json if absent); marks the key consumed.
  const json* child(std::string_view key);
  std::string child_path(std::string_view key) const;
  // Throws ConfigError naming the first key that was never read.
  void finish() const;

 private:
  template <class T>
  T convert(std::string_view key, const json& v) const;

  const json& j_;
  std::string path_;
  std::vector<std::string> used_;
};

template <class T>
T JsonReader::convert(std::string_view key, const json& v) const {
  const std::string where = child_path(key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(where, "expected a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError(where, "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_unsigned() == false && v.get<std::int64_t>() < 0) {
        throw ConfigError(where, "expected a non-negative integer");
      }
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(where, "expected a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(where, "expected a string");
  }
  try {
    return v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where, e.what());
  }
}

template <class T>
T JsonReader::get(std::string_view key, const T& fallback) {
  if (!has(key)) return fallback;
  used_.emplace_back(key);
  return convert<T>(key, j_.at(std::string(key)));
}

template <class T>
T JsonReader::require(std::string_view key) {
  if (!has(key)) throw ConfigError(child_path(key), "missing required key");
  used_.emplace_back(key);
  return convert<T>(key, j_.at(std::string(key)));
}

struct NamedTensor {
  std::string name;
  Tensor value;
};

// "GRFT", u32 version, u32 count, then per tensor: u32 name length, name bytes,
// u8 dtype (1 f32, 2 f64), u8 rank, u64 dims, payload. All little-endian.
std::vector<std::uint8_t> encode_container(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_container(std::span<const std::uint8_t> bytes);

std::string sha256_hex(std::span<const std::uint8_t> bytes);

enum class ArtifactKind { kCheckpoint, kActivations, kDataset, kReport };
std::string_view to_string(ArtifactKind kind);
ArtifactKind parse_artifact_kind(std::string_view name);

struct Artifact {
  json manifest;
  std::vector<NamedTensor> tensors;

  const Tensor& tensor(std::string_view name) const;
};

std::filesystem::path manifest_path(const std::filesystem::path& container);

// Writes the container to `path` and its manifest to `path`.json, each through a
// temporary file and rename. `meta` is merged into the manifest.
void write_artifact(const std::filesystem::path& path, ArtifactKind kind, const std::vector<NamedTensor>& tensors,
                    const json& meta);
// Verifies kind, version and content hash before decoding.
Artifact read_artifact(const std::filesystem::path& path, ArtifactKind expected);

// Atomic text write (temp file + rename).
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

// Content hash of every parameter tensor in name order.
std::string fingerprint(const ModelGraph& g);

// Config <-> JSON. Parsing is strict: unknown keys and wrong types raise ConfigError.
json to_json(const DiTConfig& cfg);
json to_json(const OperatorConfig& cfg);
DiTConfig dit_config_from_json(const json& j, const std::string& path = "");
OperatorConfig operator_config_from_json(const json& j, const std::string& path = "");

// Plans carry their targets explicitly; a stored "layers" list must agree with them.
json to_json(const GraftPlan& plan);
GraftPlan graft_plan_from_json(const json& j, const std::string& path = "");

void save_checkpoint(const ModelGraph& g, const std::filesystem::path& path, const json& extra = json::object());
ModelGraph load_checkpoint(const std::filesystem::path& path);

// Records round-trip exactly; an empty set is rejected.
void save_activations(const ActivationDataset& acts, const std::filesystem::path& path);
ActivationDataset load_activations(const std::filesystem::path& path);

void save_dataset(const BlobDataset& data, const std::filesystem::path& path);
BlobDataset load_dataset(const std::filesystem::path& path);

// Distilled replacement operators for a plan, one per target, stored as a report artifact.
struct OperatorBundle {
  GraftPlan plan;
  std::vector<TokenMixer> ops;
};
void save_operators(const OperatorBundle& bundle, const std::filesystem::path& path, const json& extra = json::object());
OperatorBundle load_operators(const std::filesystem::path& path);

// UTC time as ISO-8601, used for manifest creation stamps.
std::string utc_timestamp();

}  // namespace graftkit
