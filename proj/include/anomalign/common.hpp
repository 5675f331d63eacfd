#pragma once

#include <stdexcept>
#include <string>

namespace anomalign {

/// Base class for every error raised by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The 8x8 DLT system (or a derived product) is numerically singular.
class DegenerateCorrespondence : public Error {
public:
    using Error::Error;
};

/// Dehomogenization would divide by (almost) zero.
class PointAtInfinity : public Error {
public:
    using Error::Error;
};

/// A rejection sampler could not satisfy its constraint.
class InfeasibleParams : public Error {
public:
    using Error::Error;
};

/// Training loss became NaN/inf; carries the offending step index.
class NonFiniteLoss : public Error {
public:
    NonFiniteLoss(const std::string& msg, long step)
        : Error(msg + " (step " + std::to_string(step) + ")"), step_(step) {}
    long step() const { return step_; }

private:
    long step_;
};

class InsufficientNormals : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class UnknownLayer : public Error {
public:
    using Error::Error;
};

/// AUROC needs both classes present.
class SingleClass : public Error {
public:
    using Error::Error;
};

class InvalidSpec : public Error {
public:
    using Error::Error;
};

/// Per-image alignment failed; the image is passed through and flagged.
class AlignmentFailure : public Error {
public:
    using Error::Error;
};

/// Config/schema validation failure (CLI exit code 1).
class ValidationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Backbone id is known but no executor/weights are available.
class BackboneUnavailable : public Error {
public:
    using Error::Error;
};

/// A persisted model refuses to run against a mismatched extractor config.
class ConfigHashMismatch : public Error {
public:
    using Error::Error;
};

} // namespace anomalign
