#pragma once

#include <stdexcept>
#include <string>

namespace mvamp {

// Root of every error the library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidAspect : Error { using Error::Error; };
struct InvalidParameter : Error { using Error::Error; };
struct InvalidMeasure : Error { using Error::Error; };
struct InvalidPrecision : Error { using Error::Error; };
struct DegeneratePosterior : Error { using Error::Error; };
struct AccuracyError : Error { using Error::Error; };
struct SingularMeasure : Error { using Error::Error; };
struct BracketError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct SchemaMismatch : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct NonConvergence : Error { using Error::Error; };

// A conjugate variance came out clearly negative.
struct NegativeVariance : Error {
    NegativeVariance(const std::string& what, double value_) : Error(what), value(value_) {}
    double value;
};

// f was not finite at some eigenvalue.
struct EvaluationError : Error {
    EvaluationError(const std::string& what, double lambda_) : Error(what), lambda(lambda_) {}
    double lambda;
};

// A divergence chi fell below the floor.
struct DegenerateDivergence : Error {
    DegenerateDivergence(const std::string& what, double chi_) : Error(what), chi(chi_) {}
    double chi;
};

// Qx + lambda*Qz <= 0 somewhere on the spectrum.
struct IndefinitePrecision : Error {
    IndefinitePrecision(const std::string& what, double min_eigenvalue_, double lambda_)
        : Error(what), min_eigenvalue(min_eigenvalue_), lambda(lambda_) {}
    double min_eigenvalue;
    double lambda;
};

}  // namespace mvamp
