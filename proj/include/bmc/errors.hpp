#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bmc {

class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class parse_error : public error {
 public:
  parse_error(std::size_t line, const std::string& what)
      : error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class empty_input_error : public error {
 public:
  using error::error;
};

class invalid_argument : public error {
 public:
  using error::error;
};

class degenerate_design_error : public error {
 public:
  using error::error;
};

class extrapolation_error : public error {
 public:
  using error::error;
};

class decomposition_error : public error {
 public:
  using error::error;
};

class insufficient_data_error : public error {
 public:
  using error::error;
};

class undefined_auc_error : public error {
 public:
  using error::error;
};

class invalid_mask_error : public error {
 public:
  using error::error;
};

class unsupported_variant_error : public error {
 public:
  using error::error;
};

// Raised when the sampler meets a non-finite quantity; what() carries the dump.
class chain_abort : public error {
 public:
  using error::error;
};

// A chain directory is missing files or has truncated draw tables.
class incomplete_chain_error : public error {
 public:
  using error::error;
};

}  // namespace bmc
