#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace kalos {

inline constexpr const char* kVersion = "0.1.0";

/// Number with 12 significant digits; integral values keep a ".0" suffix and
/// non-finite values become "null".
std::string format_number(double v);

/// Deterministic JSON text: sorted keys, two-space indent, numbers through
/// format_number, trailing newline.
std::string report_text(const nlohmann::json& j);
void write_json(const std::filesystem::path& p, const nlohmann::json& j);

/// Comma-separated rows with a header; cells are written verbatim.
void write_csv(const std::filesystem::path& p, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);
std::string csv_cell(std::optional<double> v);  // empty for nullopt

/// 64-bit FNV-1a of the file bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& p);

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace kalos
