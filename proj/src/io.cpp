#include "mwmhe/io.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>

namespace mwmhe {

Matrix matrix_from_json(const nlohmann::json& j, const std::string& name) {
  if (!j.is_array()) throw ValidationError(name + " must be a nested array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) return Matrix(0, 0);
  // A flat array of numbers is read as a column.
  if (!j.front().is_array()) {
    Matrix m(rows, 1);
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (!j[static_cast<std::size_t>(i)].is_number()) {
        throw ValidationError(name + " entry " + std::to_string(i) + " is not a number");
      }
      m(i, 0) = j[static_cast<std::size_t>(i)].get<double>();
    }
    return m;
  }
  const auto cols = static_cast<Eigen::Index>(j.front().size());
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw ValidationError(name + " row " + std::to_string(i) + " does not have " +
                            std::to_string(cols) + " entries");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      const auto& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) {
        throw ValidationError(name + "(" + std::to_string(i) + "," + std::to_string(c) +
                              ") is not a number");
      }
      m(i, c) = v.get<double>();
    }
  }
  return m;
}

Vector vector_from_json(const nlohmann::json& j, const std::string& name) {
  if (!j.is_array()) throw ValidationError(name + " must be an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) {
      throw ValidationError(name + " entry " + std::to_string(i) + " is not a number");
    }
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(i, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json vector_to_json(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

SystemSpec system_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("system definition must be a JSON object");
  static const std::set<std::string> known = {"E", "A", "B", "H", "Q", "R", "constraints", "prior"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ValidationError("unknown key in system definition: " + key);
  }
  auto required = [&](const char* key) {
    if (!j.contains(key)) throw ValidationError(std::string("system definition lacks ") + key);
    return matrix_from_json(j.at(key), key);
  };

  SystemSpec spec;
  auto& sys = spec.sys;
  sys.E = required("E");
  sys.A = required("A");
  sys.H = required("H");
  sys.Q = required("Q");
  sys.R = required("R");
  sys.B = j.contains("B") ? matrix_from_json(j.at("B"), "B") : Matrix(sys.E.rows(), 0);
  if (sys.B.size() == 0) sys.B.resize(sys.E.rows(), 0);
  sys.check_dimensions();

  const Eigen::Index n = sys.n();
  if (j.contains("constraints")) {
    const auto& c = j.at("constraints");
    if (!c.is_object()) throw ValidationError("constraints must be an object");
    for (const char* key : {"Ec", "Ac", "dc"}) {
      if (!c.contains(key)) throw ValidationError(std::string("constraints lack ") + key);
    }
    spec.constraints.Ec = matrix_from_json(c.at("Ec"), "Ec");
    spec.constraints.Ac = matrix_from_json(c.at("Ac"), "Ac");
    spec.constraints.dc = vector_from_json(c.at("dc"), "dc");
    if (spec.constraints.dc.size() == 0) {
      spec.constraints.Ec.resize(0, n);
      spec.constraints.Ac.resize(0, n);
    }
  } else {
    spec.constraints.Ec.resize(0, n);
    spec.constraints.Ac.resize(0, n);
    spec.constraints.dc.resize(0);
  }
  spec.constraints.check_dimensions(n);

  spec.prior.x0 = Vector::Zero(n);
  spec.prior.P0 = Matrix::Identity(n, n);
  if (j.contains("prior")) {
    const auto& p = j.at("prior");
    if (p.contains("x0")) spec.prior.x0 = vector_from_json(p.at("x0"), "x0");
    if (p.contains("P0")) spec.prior.P0 = matrix_from_json(p.at("P0"), "P0");
  }
  if (spec.prior.x0.size() != n) throw DimensionError("prior x0 must have length " + std::to_string(n));
  if (spec.prior.P0.rows() != n || spec.prior.P0.cols() != n) {
    throw DimensionError("prior P0 must be " + std::to_string(n) + "x" + std::to_string(n));
  }
  return spec;
}

nlohmann::json system_to_json(const SystemSpec& spec) {
  nlohmann::json j;
  j["E"] = matrix_to_json(spec.sys.E);
  j["A"] = matrix_to_json(spec.sys.A);
  j["B"] = matrix_to_json(spec.sys.B);
  j["H"] = matrix_to_json(spec.sys.H);
  j["Q"] = matrix_to_json(spec.sys.Q);
  j["R"] = matrix_to_json(spec.sys.R);
  if (!spec.constraints.empty()) {
    j["constraints"] = {{"Ec", matrix_to_json(spec.constraints.Ec)},
                        {"Ac", matrix_to_json(spec.constraints.Ac)},
                        {"dc", vector_to_json(spec.constraints.dc)}};
  }
  j["prior"] = {{"x0", vector_to_json(spec.prior.x0)}, {"P0", matrix_to_json(spec.prior.P0)}};
  return j;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    // The reader reports a byte offset; translate it to line/column.
    std::ifstream again(path);
    std::string text((std::istreambuf_iterator<char>(again)), std::istreambuf_iterator<char>());
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ValidationError(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) +
                          ": " + e.what());
  }
}

SystemSpec load_system(const std::filesystem::path& path) {
  return system_from_json(read_json_file(path));
}

}  // namespace mwmhe
