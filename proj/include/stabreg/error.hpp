#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace stabreg {

enum class ErrorKind {
  invalid_config,
  missing_file,
  missing_column,
  non_binary_label,
  all_rows_dropped,
  parse_error,
  degenerate_split,
  empty_dataset,
  shape_mismatch,
  non_finite,
  divergence,
  misaligned_context,
  single_class,
  too_many_features,
  io_error,
  verification_failed,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_config: return "invalid-config";
    case ErrorKind::missing_file: return "missing-file";
    case ErrorKind::missing_column: return "missing-column";
    case ErrorKind::non_binary_label: return "non-binary-label";
    case ErrorKind::all_rows_dropped: return "all-rows-dropped";
    case ErrorKind::parse_error: return "parse-error";
    case ErrorKind::degenerate_split: return "degenerate-split";
    case ErrorKind::empty_dataset: return "empty-dataset";
    case ErrorKind::shape_mismatch: return "shape-mismatch";
    case ErrorKind::non_finite: return "non-finite";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::misaligned_context: return "misaligned-context";
    case ErrorKind::single_class: return "single-class";
    case ErrorKind::too_many_features: return "too-many-features";
    case ErrorKind::io_error: return "io-error";
    case ErrorKind::verification_failed: return "verification-failed";
  }
  return "unknown";
}

/// Exception carrying a machine-checkable kind alongside the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace stabreg
