#include "kalos/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace kalos {

std::string format_number(double v) {
  if (!std::isfinite(v)) return "null";
  if (v == 0.0) return "0.0";  // also folds -0
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  std::string s = buf;
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

namespace {

void emit(std::ostringstream& out, const nlohmann::json& j, int indent) {
  const std::string pad(static_cast<std::size_t>(indent) * 2, ' ');
  const std::string inner(static_cast<std::size_t>(indent + 1) * 2, ' ');
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      if (j.empty()) {
        out << "{}";
        return;
      }
      // nlohmann's default object type is an ordered std::map, so keys come sorted.
      out << "{\n";
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out << ",\n";
        first = false;
        out << inner << nlohmann::json(it.key()).dump() << ": ";
        emit(out, it.value(), indent + 1);
      }
      out << "\n" << pad << "}";
      return;
    }
    case nlohmann::json::value_t::array: {
      if (j.empty()) {
        out << "[]";
        return;
      }
      out << "[\n";
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out << ",\n";
        out << inner;
        emit(out, j[i], indent + 1);
      }
      out << "\n" << pad << "]";
      return;
    }
    case nlohmann::json::value_t::number_float:
      out << format_number(j.get<double>());
      return;
    default:
      out << j.dump();
  }
}

}  // namespace

std::string report_text(const nlohmann::json& j) {
  std::ostringstream out;
  emit(out, j, 0);
  out << "\n";
  return out.str();
}

void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << report_text(j);
  if (!f) throw std::runtime_error("write failed: " + p.string());
}

void write_csv(const std::filesystem::path& p, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) f << (i ? "," : "") << cells[i];
    f << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  if (!f) throw std::runtime_error("write failed: " + p.string());
}

std::string csv_cell(std::optional<double> v) {
  if (!v || !std::isfinite(*v)) return "";
  return format_number(*v);
}

std::string file_hash(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (f.read(buf, sizeof buf) || f.gcount() > 0) {
    for (std::streamsize i = 0; i < f.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

}  // namespace kalos
