#pragma once

#include <stdexcept>
#include <string>

namespace grpodlab {

// Invalid configuration supplied by the user. CLI maps this to exit code 2.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// A documented precondition was violated by the caller.
struct contract_error : std::logic_error {
  explicit contract_error(const std::string& msg) : std::logic_error(msg) {}
};

// File I/O failure, bad file format, checksum or version mismatch.
struct io_error : std::runtime_error {
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Data that should have been well-formed is not (e.g. an unparseable prompt).
struct malformed_error : std::runtime_error {
  explicit malformed_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Unrecoverable runtime failure mid-run (non-finite loss, aborted training).
// CLI maps this to exit code 3.
struct runtime_abort : std::runtime_error {
  explicit runtime_abort(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace grpodlab
