#include "fileio.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>

#include <spdlog/spdlog.h>

#include "vpe/error.hpp"

namespace fs = std::filesystem;

namespace vpe::io {

void fail(const std::string& what) { throw Error(Errc::IoFail, what + ": " + std::strerror(errno)); }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(int fd, std::string_view buf) {
  std::size_t done = 0;
  while (done < buf.size()) {
    ssize_t w = ::write(fd, buf.data() + done, buf.size() - done);
    if (w < 0) {
      if (errno == EINTR) continue;
      fail("write");
    }
    done += static_cast<std::size_t>(w);
  }
}

void write_file_atomic(const fs::path& p, std::string_view text, bool sync) {
  fs::path tmp = p;
  tmp += ".tmp";
  int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) fail("open " + tmp.string());
  try {
    write_all(fd, text);
    if (sync) ::fdatasync(fd);
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::close(fd);
  if (::rename(tmp.c_str(), p.c_str()) != 0) fail("rename " + p.string());
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xFF));
}

void put_i64(std::string& out, std::int64_t v) {
  auto u = static_cast<std::uint64_t>(v);
  for (int s = 56; s >= 0; s -= 8) out.push_back(static_cast<char>((u >> s) & 0xFF));
}

std::uint64_t get_be(const char* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v = (v << 8) | static_cast<unsigned char>(p[i]);
  return v;
}

RecordLog::RecordLog(const fs::path& path, bool sync, const std::function<void(std::string_view)>& visit)
    : path_(path), sync_(sync) {
  std::string data = read_file(path);
  std::size_t pos = 0;
  while (pos + 4 <= data.size()) {
    auto len = static_cast<std::size_t>(get_be(data.data() + pos, 4));
    if (pos + 4 + len > data.size()) break;
    visit(std::string_view(data).substr(pos + 4, len));
    pos += 4 + len;
  }
  fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) fail("open " + path.string());
  if (pos != data.size()) {
    spdlog::warn("{}: truncating torn tail ({} of {} bytes valid)", path.string(), pos, data.size());
    if (::ftruncate(fd_, static_cast<off_t>(pos)) != 0) fail("truncate " + path.string());
  }
}

RecordLog::~RecordLog() {
  if (fd_ >= 0) ::close(fd_);
}

void RecordLog::append(std::string_view record) {
  std::string buf;
  buf.reserve(4 + record.size());
  put_u32(buf, static_cast<std::uint32_t>(record.size()));
  buf += record;
  off_t before = ::lseek(fd_, 0, SEEK_END);
  try {
    write_all(fd_, buf);
    if (sync_ && ::fdatasync(fd_) != 0) fail("fdatasync");
  } catch (...) {
    if (before >= 0 && ::ftruncate(fd_, before) != 0) spdlog::error("{}: cannot roll back partial append", path_.string());
    throw;
  }
}

}  // namespace vpe::io
