#pragma once

#include <filesystem>

#include <json.hpp>

#include "heapr/moe_model.hpp"

namespace heapr {

inline constexpr int kCheckpointVersion = 1;

nlohmann::json config_to_json(const MoEConfig& cfg);
MoEConfig config_from_json(const nlohmann::json& j);

// Doubles are written in shortest round-trip form, so load(save(m)) == m bit for bit.
nlohmann::json model_to_json(const MoEModel& model);
MoEModel model_from_json(const nlohmann::json& j);

void save_model(const MoEModel& model, const std::filesystem::path& path);
MoEModel load_model(const std::filesystem::path& path);

}  // namespace heapr
