#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pshop {

enum class ErrorCode {
  invalid_spec,
  invalid_shape,
  metadata,
  insufficient_data,
  empty_hop,
  degenerate_labels,
  empty_supervision,
  format,
  io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_spec: return "invalid-spec";
    case ErrorCode::invalid_shape: return "invalid-shape";
    case ErrorCode::metadata: return "metadata";
    case ErrorCode::insufficient_data: return "insufficient-data";
    case ErrorCode::empty_hop: return "empty-hop";
    case ErrorCode::degenerate_labels: return "degenerate-labels";
    case ErrorCode::empty_supervision: return "empty-supervision";
    case ErrorCode::format: return "format";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library. `hop()` is 0 unless the error was
/// raised while processing a specific encoder/decoder hop.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, int hop = 0)
      : std::runtime_error(compose(code, message, hop)), code_(code), hop_(hop) {}

  ErrorCode code() const noexcept { return code_; }
  int hop() const noexcept { return hop_; }

  /// Same error, tagged with the hop it occurred in.
  Error at_hop(int hop) const {
    std::string msg = what();
    auto pos = msg.find(": ");
    return Error(code_, pos == std::string::npos ? msg : msg.substr(pos + 2), hop);
  }

 private:
  static std::string compose(ErrorCode code, const std::string& message, int hop) {
    std::string out(to_string(code));
    if (hop > 0) out += " (hop " + std::to_string(hop) + ")";
    out += ": ";
    out += message;
    return out;
  }

  ErrorCode code_;
  int hop_;
};

}  // namespace pshop
