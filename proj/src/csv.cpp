#include "npgq/csv.hpp"

#include <charconv>

namespace npgq {

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<std::string> header_lines(const ExperimentConfig& config, const std::string& command) {
  std::vector<std::string> out{std::string("# ") + kVersion, "# command=" + command};
  for (const auto& line : config.echo()) out.push_back("# " + line);
  return out;
}

CsvWriter::CsvWriter(const std::filesystem::path& path, const ExperimentConfig& config, const std::string& command)
    : path_(path), out_(path) {
  if (!out_) throw Error("cannot open '" + path.string() + "' for writing");
  for (const auto& line : header_lines(config, command)) out_ << line << '\n';
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out_ << ',';
    out_ << cells[i];
  }
  out_ << '\n';
  if (!out_) throw Error("write to '" + path_.string() + "' failed");
}

}  // namespace npgq
