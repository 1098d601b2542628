#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ieegclip {

enum class ErrorKind {
  invalid_spec,
  insufficient_data,
  alignment,
  shape_mismatch,
  invalid_argument,
  unknown_channel,
  empty_dataset,
  non_finite,
  io,
  format,
  config,
  state,
};

std::string_view to_string(ErrorKind kind) noexcept;

// All library failures surface as this exception; `kind()` is stable and is
// what the CLI serializes into its error document.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace ieegclip
