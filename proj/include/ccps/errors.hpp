#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ccps {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates a documented contract (bad shape, bad value, bad config).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or stream failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary payload. Carries the byte offset where parsing stopped and,
/// when known, the index of the record being decoded (-1 for headers).
class FormatError : public ValidationError {
 public:
  FormatError(const std::string& file, std::uint64_t offset, std::int64_t record, const std::string& what)
      : ValidationError(compose(file, offset, record, what)), offset_(offset), record_(record) {}

  std::uint64_t offset() const noexcept { return offset_; }
  std::int64_t record() const noexcept { return record_; }

 private:
  static std::string compose(const std::string& file, std::uint64_t offset, std::int64_t record,
                             const std::string& what) {
    std::string msg = file + ": " + what + " (byte offset " + std::to_string(offset);
    if (record >= 0) msg += ", record " + std::to_string(record);
    return msg + ")";
  }

  std::uint64_t offset_;
  std::int64_t record_;
};

}  // namespace ccps
