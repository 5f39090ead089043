#pragma once

#include <stdexcept>
#include <string>

namespace covnn {

// Validation errors mean the caller handed us bad input or config (CLI exit 2);
// runtime errors mean a computation failed on legitimate input (CLI exit 1).
enum class ErrorKind { validation, runtime };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string code, const std::string& message)
        : std::runtime_error(message), kind_(kind), code_(std::move(code)) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }
    [[nodiscard]] const std::string& code() const noexcept { return code_; }

    // Single-line, machine-parsable form used by the CLI.
    [[nodiscard]] std::string formatted() const { return "error: " + code_ + ": " + what(); }

private:
    ErrorKind kind_;
    std::string code_;
};

#define COVNN_DEFINE_ERROR(NAME, KIND)                                       \
    class NAME final : public Error {                                        \
    public:                                                                  \
        explicit NAME(const std::string& message)                            \
            : Error(ErrorKind::KIND, #NAME, message) {}                      \
    }

COVNN_DEFINE_ERROR(InvalidMatrix, validation);
COVNN_DEFINE_ERROR(DimensionError, validation);
COVNN_DEFINE_ERROR(InvalidThreshold, validation);
COVNN_DEFINE_ERROR(InvalidSubsample, validation);
COVNN_DEFINE_ERROR(InvalidRange, validation);
COVNN_DEFINE_ERROR(InsufficientSamples, validation);
COVNN_DEFINE_ERROR(DegenerateCovariance, validation);
COVNN_DEFINE_ERROR(DegenerateFit, validation);
COVNN_DEFINE_ERROR(DegenerateDesign, validation);
COVNN_DEFINE_ERROR(DegenerateInput, validation);
COVNN_DEFINE_ERROR(DegenerateEmbedding, validation);
COVNN_DEFINE_ERROR(KernelError, validation);
COVNN_DEFINE_ERROR(TraceMismatch, validation);
COVNN_DEFINE_ERROR(CsvFormatError, validation);
COVNN_DEFINE_ERROR(ConfigError, validation);
COVNN_DEFINE_ERROR(EigenNoConvergence, runtime);
COVNN_DEFINE_ERROR(DivergenceError, runtime);
COVNN_DEFINE_ERROR(IoError, runtime);

#undef COVNN_DEFINE_ERROR

}  // namespace covnn
