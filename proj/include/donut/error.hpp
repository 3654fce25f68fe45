#pragma once

#include <stdexcept>
#include <string>

namespace donut {

enum class ErrorKind {
  domain,             // argument outside the function's domain
  config,             // malformed or inconsistent configuration
  geometry_mismatch,  // data rendered under a different geometry
  bad_magic,
  truncated,
  hash_mismatch,
  io,
  no_signal,
  shape_mismatch,
  runtime,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace donut
