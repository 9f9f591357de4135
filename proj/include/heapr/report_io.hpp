#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

#include <json.hpp>

#include "heapr/heapr.hpp"

namespace heapr {

inline constexpr std::string_view kToolVersion = "0.1.0";

// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

// Doubles with enough digits to round-trip exactly.
std::string format_double(double v);

// Columns: layer,expert,channel,score,token_count,method. Rows in key order.
void write_importance_csv(const ImportanceTable& table, std::ostream& out);
ImportanceTable read_importance_csv(std::istream& in);

nlohmann::json manifest_to_json(const PruneManifest& m, std::string_view config_hash);
PruneManifest manifest_from_json(const nlohmann::json& j);

nlohmann::json covariances_to_json(const CovarianceSet& covs);
CovarianceSet covariances_from_json(const nlohmann::json& j);

void write_text(const std::filesystem::path& path, const std::string& text);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace heapr
