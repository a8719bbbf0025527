#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "mwmhe/model.hpp"

namespace mwmhe {

/// Everything a system definition file carries.
struct SystemSpec {
  DescriptorSystem sys;
  ConstraintSet constraints;
  Prior prior;
};

Matrix matrix_from_json(const nlohmann::json& j, const std::string& name);
Vector vector_from_json(const nlohmann::json& j, const std::string& name);
nlohmann::json matrix_to_json(const Matrix& m);
nlohmann::json vector_to_json(const Vector& v);

/// Keys E, A, H, Q, R (required), B (optional, zero columns when absent),
/// "constraints" {Ec, Ac, dc} and "prior" {x0, P0} (defaults 0 and I).
/// Dimensions are cross-checked; errors are ValidationError.
SystemSpec system_from_json(const nlohmann::json& j);
nlohmann::json system_to_json(const SystemSpec& spec);

/// Parse errors carry the line and column reported by the JSON reader.
nlohmann::json read_json_file(const std::filesystem::path& path);
SystemSpec load_system(const std::filesystem::path& path);

}  // namespace mwmhe
