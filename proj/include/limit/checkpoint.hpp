#pragma once

#include "limit/training.hpp"

#include <json.hpp>

#include <filesystem>

namespace limit {

inline constexpr int kCheckpointSchemaVersion = 1;

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

/// JSON container with layer widths, every tensor, class ids and the
/// calibration parameters. Doubles are written with round-trip precision.
nlohmann::json checkpoint_to_json(const ModelState& state, std::uint64_t seed);
ModelState checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const ModelState& state, std::uint64_t seed);
ModelState load_checkpoint(const std::filesystem::path& path);

/// True when every tensor, id list and flag matches bit for bit.
bool same_state(const ModelState& a, const ModelState& b);

}  // namespace limit
