#pragma once

#include <stdexcept>
#include <string>

namespace pcreg {

// Domain errors map to CLI exit code 2; usage/parse errors to 3.
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyCloud : DomainError {
    EmptyCloud() : DomainError("point cloud is empty") {}
};

struct CoordinateOutOfRange : DomainError {
    explicit CoordinateOutOfRange(const std::string& what) : DomainError(what) {}
};

struct TooFewPoints : DomainError {
    explicit TooFewPoints(const std::string& what) : DomainError(what) {}
};

struct ShapeMismatch : DomainError {
    explicit ShapeMismatch(const std::string& what) : DomainError(what) {}
};

struct NonScalarOutput : DomainError {
    NonScalarOutput() : DomainError("backward requires a scalar output") {}
};

struct NonPositiveDelta : DomainError {
    NonPositiveDelta() : DomainError("step size delta must be > 0") {}
};

struct SelectiveParamsNotAllowed : DomainError {
    SelectiveParamsNotAllowed()
        : DomainError("convolutional form requires time-invariant parameters") {}
};

struct EmptyFeatures : DomainError {
    EmptyFeatures() : DomainError("feature set is empty") {}
};

struct TooFewCorrespondences : DomainError {
    explicit TooFewCorrespondences(const std::string& what) : DomainError(what) {}
};

struct InsufficientPairs : DomainError {
    explicit InsufficientPairs(const std::string& what) : DomainError(what) {}
};

struct DegenerateConfiguration : DomainError {
    explicit DegenerateConfiguration(const std::string& what) : DomainError(what) {}
};

struct NoOverlap : DomainError {
    explicit NoOverlap(const std::string& what) : DomainError(what) {}
};

struct EmptySet : DomainError {
    explicit EmptySet(const std::string& what) : DomainError(what) {}
};

struct NoGroundTruthPairs : DomainError {
    NoGroundTruthPairs() : DomainError("no ground-truth pairs with positive overlap") {}
};

struct NonAscendingVoxels : DomainError {
    NonAscendingVoxels() : DomainError("voxel sizes must be strictly increasing") {}
};

struct InfeasibleOverlap : DomainError {
    explicit InfeasibleOverlap(const std::string& what) : DomainError(what) {}
};

struct DivergedLoss : DomainError {
    explicit DivergedLoss(const std::string& what) : DomainError(what) {}
};

struct ParseError : DomainError {
    ParseError(const std::string& what, long line)
        : DomainError(what + " (line " + std::to_string(line) + ")"), line_number(line) {}
    long line_number;
};

struct UnsupportedPlyFeature : DomainError {
    explicit UnsupportedPlyFeature(const std::string& what) : DomainError(what) {}
};

}  // namespace pcreg
