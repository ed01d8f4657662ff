#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace imu_align {

enum class ErrorKind {
  shape,     // tensor/dimension mismatch
  value,     // invalid argument or configuration
  parse,     // malformed input file
  io,        // filesystem failure
  coverage,  // missing anchors / ids
  version,   // cache or checkpoint format mismatch
  numeric,   // non-finite loss, gradient or parameter
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library. The kind drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace imu_align
