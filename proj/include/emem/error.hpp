#pragma once

#include <stdexcept>
#include <string>

namespace emem {

// Error categories map onto the CLI exit codes: usage -> 1, data -> 2,
// numeric -> 3.
enum class ErrorKind { kUsage, kData, kNumeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error usage_error(const std::string& msg) { return Error(ErrorKind::kUsage, msg); }
inline Error data_error(const std::string& msg) { return Error(ErrorKind::kData, msg); }
inline Error numeric_error(const std::string& msg) { return Error(ErrorKind::kNumeric, msg); }

}  // namespace emem
