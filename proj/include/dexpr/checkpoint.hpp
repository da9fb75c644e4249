#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dexpr/network.hpp"
#include "json.hpp"

namespace dexpr {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> class_names;
  nlohmann::json config = nlohmann::json::object();

  bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
  NetworkGraph graph;
  Parameters<float> params;
  CheckpointMeta meta;
};

nlohmann::json graph_to_json(const NetworkGraph& graph);
NetworkGraph graph_from_json(const nlohmann::json& j);

// Layout:
//   "DXPR" | u32 version | u32 length + description (JSON text: graph and meta)
//   | u32 record count | records: u32 name length, name bytes, tensor | u32 CRC-32
// All integers little-endian; the CRC covers every preceding byte.
std::string encode_checkpoint(const NetworkGraph& graph, const Parameters<float>& params,
                              const CheckpointMeta& meta);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const NetworkGraph& graph, const Parameters<float>& params,
                     const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throws FormatError unless `params` holds exactly one weights and one bias
/// tensor of the right shape for every parameterized layer of `graph`.
void validate_parameters(const NetworkGraph& graph, const Parameters<float>& params);

/// Throws DatasetError when a checkpoint is used with a different class count.
void require_class_count(const Checkpoint& checkpoint, std::size_t num_classes);

}  // namespace dexpr
