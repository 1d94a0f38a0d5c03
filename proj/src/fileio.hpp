#pragma once

// File helpers shared by the on-disk logs (bus topics, metastore, ledger).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>

namespace vpe::io {

[[noreturn]] void fail(const std::string& what);

std::string read_file(const std::filesystem::path& p);
void write_all(int fd, std::string_view buf);

/// Writes `text` to a sibling temp file and renames it over `p`.
void write_file_atomic(const std::filesystem::path& p, std::string_view text, bool sync);

void put_u32(std::string& out, std::uint32_t v);
void put_i64(std::string& out, std::int64_t v);
std::uint64_t get_be(const char* p, int n);

/// Append-only file of u32be-length-prefixed records.
class RecordLog {
 public:
  /// Opens (creating) `path`, hands every complete record to `visit` and cuts
  /// off a torn trailing record.
  RecordLog(const std::filesystem::path& path, bool sync, const std::function<void(std::string_view)>& visit);
  ~RecordLog();
  RecordLog(const RecordLog&) = delete;
  RecordLog& operator=(const RecordLog&) = delete;

  /// Not thread-safe; callers serialize. A failed append is rolled back.
  void append(std::string_view record);

 private:
  std::filesystem::path path_;
  bool sync_;
  int fd_ = -1;
};

}  // namespace vpe::io
