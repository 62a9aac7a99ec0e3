#include "eagle/metrics.hpp"

#include <charconv>

#include "eagle/errors.hpp"

namespace eagle::metrics {

JsonlWriter::JsonlWriter(const std::string& path, bool append) : path_(path) {
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw IoError("metrics: cannot open " + path);
}

void JsonlWriter::write(const nlohmann::json& record) {
  if (!out_) throw StateError("metrics: writer not open");
  out_ << record.dump() << '\n';
  if (!out_) throw IoError("metrics: write failed for " + path_);
}

void JsonlWriter::flush() {
  if (out_) out_.flush();
}

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header, bool append)
    : columns_(header.size()), path_(path) {
  if (header.empty()) throw InputError("csv: empty header");
  const bool fresh = !append || !std::ifstream(path).good();
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw IoError("csv: cannot open " + path);
  if (fresh) row(header);
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (!out_) throw StateError("csv: writer not open");
  if (cells.size() != columns_)
    throw InputError("csv: expected " + std::to_string(columns_) + " cells, got " +
                     std::to_string(cells.size()));
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out_ << ',';
    out_ << cells[i];
  }
  out_ << '\n';
}

void CsvWriter::flush() {
  if (out_) out_.flush();
}

std::string CsvWriter::num(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw StateError("csv: number formatting failed");
  return std::string(buf, end);
}

}  // namespace eagle::metrics
