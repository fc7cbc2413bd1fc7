#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "json.hpp"
#include "taylorseg/fewshot.hpp"
#include "taylorseg/params.hpp"
#include "taylorseg/segnet.hpp"

namespace taylorseg {

inline constexpr const char* kCheckpointFormat = "taylorseg-ckpt-v1";

nlohmann::json to_json(const NetworkConfig& cfg);
NetworkConfig network_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FewShotConfig& cfg);
FewShotConfig fewshot_from_json(const nlohmann::json& j);

// FNV-1a over the canonical JSON form of the network configuration.
std::uint64_t config_hash(const NetworkConfig& cfg);

struct Checkpoint {
  NetworkConfig network;
  FewShotConfig fewshot;
  ParamStore params;
  std::uint64_t iterations = 0;
};

void save_checkpoint(std::ostream& out, const Checkpoint& ckpt);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws DataError on a malformed file or a hash mismatch.
Checkpoint load_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace taylorseg
