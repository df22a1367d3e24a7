#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace fecs {

struct LabeledDataset;

// Shortest round-trip decimal form (std::to_chars); CSV and reports use this
// so identical runs produce byte-identical files.
std::string format_double(double v);

void write_text_file(const std::filesystem::path& p, const std::string& text);
std::string read_text_file(const std::filesystem::path& p);

nlohmann::json load_json(const std::filesystem::path& p);
void save_json(const std::filesystem::path& p, const nlohmann::json& j);

// header: x_0,...,x_{d-1},y
void write_dataset_csv(const LabeledDataset& data, const std::filesystem::path& p);
LabeledDataset read_dataset_csv(const std::filesystem::path& p,
                                bool classification, int source_tag);

std::uint64_t fnv1a(const std::string& s);
std::uint64_t hash_file(const std::filesystem::path& p);

}  // namespace fecs
