#pragma once

#include <stdexcept>
#include <string>

namespace guardgate {

// Base class for all guardgate failures. Subclasses map to the exit-code
// contract in the CLI: validation/data errors exit 3, runtime/upstream exit 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad input data: malformed files, schema violations, precondition failures.
struct ValidationError : Error {
    using Error::Error;
};

// Transient or environmental failures: unreachable upstreams, timeouts.
struct RuntimeFailure : Error {
    using Error::Error;
};

struct InputTooLong : ValidationError {
    using ValidationError::ValidationError;
};
struct InvalidEncoding : ValidationError {
    using ValidationError::ValidationError;
};
struct PatternCompileError : ValidationError {
    using ValidationError::ValidationError;
};
struct DimensionMismatch : ValidationError {
    using ValidationError::ValidationError;
};
struct ZeroVector : ValidationError {
    using ValidationError::ValidationError;
};
struct EmptyCorpus : ValidationError {
    using ValidationError::ValidationError;
};
struct CorpusTooSmall : ValidationError {
    using ValidationError::ValidationError;
};
struct TextTooShort : ValidationError {
    using ValidationError::ValidationError;
};
struct UnknownToken : ValidationError {
    using ValidationError::ValidationError;
};
struct EmptyPromptSet : ValidationError {
    using ValidationError::ValidationError;
};
struct DegenerateClusters : ValidationError {
    using ValidationError::ValidationError;
};
struct ZeroDirection : ValidationError {
    using ValidationError::ValidationError;
};
struct SchemaError : ValidationError {
    using ValidationError::ValidationError;
};
struct EmptyDataset : ValidationError {
    using ValidationError::ValidationError;
};
struct NoUnsafeRecords : ValidationError {
    using ValidationError::ValidationError;
};

struct EmbedderUnavailable : RuntimeFailure {
    using RuntimeFailure::RuntimeFailure;
};
struct UpstreamFailure : RuntimeFailure {
    using RuntimeFailure::RuntimeFailure;
};
struct UpstreamTimeout : UpstreamFailure {
    using UpstreamFailure::UpstreamFailure;
};
struct UpstreamRateLimited : UpstreamFailure {
    using UpstreamFailure::UpstreamFailure;
};
struct TranslatorTimeout : RuntimeFailure {
    using RuntimeFailure::RuntimeFailure;
};
struct EmptyRewrite : RuntimeFailure {
    using RuntimeFailure::RuntimeFailure;
};
struct VerdictParseError : RuntimeFailure {
    using RuntimeFailure::RuntimeFailure;
};

}  // namespace guardgate
