#include "fecs/io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "fecs/model.hpp"

namespace fecs {

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("format_double failed");
  return std::string(buf, ptr);
}

void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path().empty()
                                          ? std::filesystem::path(".")
                                          : p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + p.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + p.string());
}

std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

nlohmann::json load_json(const std::filesystem::path& p) {
  return nlohmann::json::parse(read_text_file(p));
}

void save_json(const std::filesystem::path& p, const nlohmann::json& j) {
  write_text_file(p, j.dump(2) + "\n");
}

void write_dataset_csv(const LabeledDataset& data, const std::filesystem::path& p) {
  std::string out;
  for (int j = 0; j < data.dim; ++j) {
    out += "x_" + std::to_string(j) + ",";
  }
  out += "y\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto x = data.x(i);
    for (int j = 0; j < data.dim; ++j) {
      out += format_double(x[j]);
      out += ',';
    }
    out += format_double(data.ys[i]);
    out += '\n';
  }
  write_text_file(p, out);
}

LabeledDataset read_dataset_csv(const std::filesystem::path& p,
                                bool classification, int source_tag) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot open: " + p.string());
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("empty csv: " + p.string());
  int dim = 0;
  {
    std::stringstream hs(line);
    std::string col;
    while (std::getline(hs, col, ',')) {
      if (col.rfind("x_", 0) == 0) ++dim;
    }
  }
  LabeledDataset data;
  data.dim = dim;
  data.classification = classification;
  data.source_tag = static_cast<SourceTag>(source_tag);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    if (static_cast<int>(row.size()) != dim + 1)
      throw std::runtime_error("csv row width mismatch: " + p.string());
    data.xs.insert(data.xs.end(), row.begin(), row.end() - 1);
    data.ys.push_back(row.back());
  }
  return data;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_file(const std::filesystem::path& p) {
  return fnv1a(read_text_file(p));
}

}  // namespace fecs
