#pragma once

#include <filesystem>

#include <json.hpp>

#include "kalos/dataset.hpp"

namespace kalos {

/// Reads, schema-checks, normalizes and validates a dataset file. Throws
/// DatasetError naming the offending record on any failure.
Dataset parse_dataset(const std::filesystem::path& path);

/// Same as parse_dataset but from an in-memory document.
Dataset dataset_from_json(const nlohmann::json& doc);

/// Canonical relative-coordinate document.
nlohmann::json dataset_to_json(const Dataset& d);

nlohmann::json geometry_to_json(const Geometry& g);

}  // namespace kalos
