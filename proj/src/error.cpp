#include "imu_align/error.hpp"

namespace imu_align {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::value: return "value";
    case ErrorKind::parse: return "parse";
    case ErrorKind::io: return "io";
    case ErrorKind::coverage: return "coverage";
    case ErrorKind::version: return "version";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error("[" + std::string(to_string(kind)) + "] " + message), kind_(kind) {}

}  // namespace imu_align
