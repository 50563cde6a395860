#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "npgq/config.hpp"

namespace npgq {

/// Plain CSV whose first lines are a `#` block: version stamp, command, and the resolved config.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const ExperimentConfig& config, const std::string& command);

  void columns(const std::vector<std::string>& names) { row(names); }
  void row(const std::vector<std::string>& cells);

  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

/// Shortest representation that reads back to the same double.
std::string format_number(double v);

/// The `#` header lines shared by every output file.
std::vector<std::string> header_lines(const ExperimentConfig& config, const std::string& command);

}  // namespace npgq
