#include "meda/persist.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace meda {

namespace fs = std::filesystem;

u64 fnv1a64(const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  u64 h = 0xCBF29CE484222325ull;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

std::string fnv1a64_hex(const void* data, size_t len) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, fnv1a64(data, len));
  return std::string(buf);
}

namespace blob {

void write_bytes(const fs::path& path, std::span<const unsigned char> bytes) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("I/O failure while writing '" + path.string() + "'");
}

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open '" + path.string() + "' for reading");
  const std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<unsigned char> bytes(static_cast<size_t>(size));
  in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw DataError("I/O failure while reading '" + path.string() + "'");
  return bytes;
}

}  // namespace blob

json StorageReport::to_json() const {
  json banks_json = json::array();
  for (const auto& b : banks) {
    banks_json.push_back({{"bank_id", b.bank_id}, {"rows", b.rows}, {"bytes", b.bytes}});
  }
  return {{"banks", banks_json},
          {"embedding_bytes", embedding_bytes},
          {"total_bytes", total_bytes}};
}

namespace detail {

void start_checkpoint_dir(const fs::path& tmp) {
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp / "tensors");
}

StorageReport finish_checkpoint_dir(const fs::path& tmp, const fs::path& final_dir,
                                    StorageReport report) {
  std::error_code ec;
  fs::remove_all(final_dir, ec);
  fs::create_directories(final_dir.parent_path().empty() ? "." : final_dir.parent_path());
  fs::rename(tmp, final_dir, ec);
  if (ec) {
    fs::remove_all(tmp, ec);
    throw DataError("failed to move checkpoint into place at '" + final_dir.string() + "'");
  }
  return report;
}

std::string vocab_tsv(const std::array<std::vector<std::pair<u64, i64>>, kNumFields>& per_field,
                      int field) {
  std::string body;
  for (const auto& [id, row] : per_field[static_cast<size_t>(field)]) {
    body += std::to_string(field);
    body += '\t';
    body += std::to_string(id);
    body += '\t';
    body += std::to_string(row);
    body += '\n';
  }
  return body;
}

const char* field_file_name(int field) {
  return field_name(static_cast<Field>(field));
}

json load_manifest(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) {
    throw DataError("checkpoint '" + dir.string() + "' has no manifest.json");
  }
  std::ifstream in(mpath);
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!manifest.contains("format_version") ||
      manifest["format_version"].get<int>() != kCheckpointFormatVersion) {
    throw DataError("checkpoint format version mismatch (expected " +
                    std::to_string(kCheckpointFormatVersion) + ")");
  }
  return manifest;
}

}  // namespace detail

json read_checkpoint_manifest(const std::string& dir) {
  return detail::load_manifest(fs::path(dir));
}

namespace {

std::string fmt6(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return std::string(buf);
}

std::string record_line(const MetricRecord& r) {
  std::string line;
  line += r.run_id;
  line += ',';
  line += r.variant;
  line += ',';
  line += std::to_string(r.dataset_index);
  line += ',';
  line += std::to_string(r.epoch);
  line += ',';
  line += std::to_string(r.bank_id);
  line += ',';
  line += fmt6(r.train_mean_loss);
  line += ',';
  line += fmt6(r.test_auc);
  line += ',';
  line += fmt6(r.test_logloss);
  line += ',';
  line += fmt6(r.wall_ms);
  line += '\n';
  return line;
}

}  // namespace

void write_metrics_csv(const std::string& path, std::span<const MetricRecord> records,
                       bool append) {
  bool write_header = true;
  if (append && fs::exists(path) && fs::file_size(path) > 0) {
    std::ifstream in(path);
    std::string first;
    std::getline(in, first);
    if (first != kMetricsCsvHeader) {
      throw DataError("'" + path + "' exists with a different header; refusing to append");
    }
    write_header = false;
  }
  if (!fs::path(path).parent_path().empty()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  if (write_header) out << kMetricsCsvHeader << '\n';
  for (const MetricRecord& r : records) out << record_line(r);
  if (!out) throw DataError("I/O failure while writing '" + path + "'");
}

std::vector<MetricRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line)) throw DataError("'" + path + "' is empty");
  if (line != kMetricsCsvHeader) {
    throw DataError("'" + path + "' has an unexpected header: " + line);
  }
  std::vector<MetricRecord> records;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    size_t start = 0;
    while (true) {
      const size_t comma = line.find(',', start);
      if (comma == std::string::npos) {
        cols.push_back(line.substr(start));
        break;
      }
      cols.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    if (cols.size() != 9) {
      throw DataError("'" + path + "' line " + std::to_string(line_no) +
                      ": expected 9 columns, got " + std::to_string(cols.size()));
    }
    try {
      MetricRecord r;
      r.run_id = cols[0];
      r.variant = cols[1];
      r.dataset_index = std::stoi(cols[2]);
      r.epoch = std::stoi(cols[3]);
      r.bank_id = std::stoi(cols[4]);
      r.train_mean_loss = std::stod(cols[5]);
      r.test_auc = cols[6] == "nan" ? std::nan("") : std::stod(cols[6]);
      r.test_logloss = std::stod(cols[7]);
      r.wall_ms = std::stod(cols[8]);
      records.push_back(std::move(r));
    } catch (const std::exception&) {
      throw DataError("'" + path + "' line " + std::to_string(line_no) + ": malformed row");
    }
  }
  return records;
}

}  // namespace meda
