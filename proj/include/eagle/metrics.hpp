#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace eagle::metrics {

// Append-only JSONL metrics stream. Records carry no timestamps so that
// deterministic runs produce byte-identical logs.
class JsonlWriter {
 public:
  JsonlWriter() = default;
  explicit JsonlWriter(const std::string& path, bool append = false);

  void write(const nlohmann::json& record);
  void flush();
  bool is_open() const { return out_.is_open(); }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

// Minimal CSV writer: fixed header, one row per call.
class CsvWriter {
 public:
  CsvWriter() = default;
  CsvWriter(const std::string& path, const std::vector<std::string>& header, bool append = false);

  void row(const std::vector<std::string>& cells);
  void flush();
  bool is_open() const { return out_.is_open(); }
  const std::string& path() const { return path_; }

  static std::string num(double v);  // shortest round-trip formatting

 private:
  std::size_t columns_ = 0;
  std::string path_;
  std::ofstream out_;
};

}  // namespace eagle::metrics
