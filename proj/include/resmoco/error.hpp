#ifndef RESMOCO_ERROR_HPP
#define RESMOCO_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace resmoco {

enum class ErrorKind {
    shape_mismatch,
    numeric_domain,
    invalid_argument,
    axis_out_of_range,
    non_scalar_loss,
    degenerate_batch,
    spec_mismatch,
    mode_error,
    dataset_not_found,
    truncated_record,
    label_out_of_range,
    batch_too_large,
    checkpoint_corrupt,
    metrics_malformed,
    io_error,
    non_finite,
    class_mismatch,
    empty_bank,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::shape_mismatch: return "shape_mismatch";
        case ErrorKind::numeric_domain: return "numeric_domain";
        case ErrorKind::invalid_argument: return "invalid_argument";
        case ErrorKind::axis_out_of_range: return "axis_out_of_range";
        case ErrorKind::non_scalar_loss: return "non_scalar_loss";
        case ErrorKind::degenerate_batch: return "degenerate_batch";
        case ErrorKind::spec_mismatch: return "spec_mismatch";
        case ErrorKind::mode_error: return "mode_error";
        case ErrorKind::dataset_not_found: return "dataset_not_found";
        case ErrorKind::truncated_record: return "truncated_record";
        case ErrorKind::label_out_of_range: return "label_out_of_range";
        case ErrorKind::batch_too_large: return "batch_too_large";
        case ErrorKind::checkpoint_corrupt: return "checkpoint_corrupt";
        case ErrorKind::metrics_malformed: return "metrics_malformed";
        case ErrorKind::io_error: return "io_error";
        case ErrorKind::non_finite: return "non_finite";
        case ErrorKind::class_mismatch: return "class_mismatch";
        case ErrorKind::empty_bank: return "empty_bank";
    }
    return "unknown";
}

/// Single exception type for the library; `kind()` is what callers branch on.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) {
        throw Error(kind, message);
    }
}

}  // namespace resmoco

#endif  // RESMOCO_ERROR_HPP
