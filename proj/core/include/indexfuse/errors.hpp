#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace indexfuse {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class OutOfDomain : public Error {
public:
    using Error::Error;
};

class DegenerateSample : public Error {
public:
    using Error::Error;
};

class DegenerateIndex : public Error {
public:
    using Error::Error;
};

class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& msg, double norm, int iterations)
        : Error(msg), final_norm(norm), iterations(iterations) {}
    double final_norm;
    int iterations;
};

class RankDeficiency : public Error {
public:
    RankDeficiency(const std::string& msg, std::vector<int> cols)
        : Error(msg), columns(std::move(cols)) {}
    std::vector<int> columns;
};

class InsufficientLocalData : public Error {
public:
    InsufficientLocalData(const std::string& msg, double t0, double mass)
        : Error(msg), t0(t0), kernel_mass(mass) {}
    double t0;
    double kernel_mass;
};

class NonIdentifiable : public Error {
public:
    using Error::Error;
};

class DegenerateDesign : public Error {
public:
    DegenerateDesign(const std::string& msg, double t0) : Error(msg), t0(t0) {}
    double t0;
};

class MonteCarloIntegrity : public Error {
public:
    MonteCarloIntegrity(const std::string& msg, int failures, int replications)
        : Error(msg), failures(failures), replications(replications) {}
    int failures;
    int replications;
};

class IngestionError : public Error {
public:
    IngestionError(const std::string& msg, long row = -1, std::string column = {})
        : Error(msg), row(row), column(std::move(column)) {}
    long row;
    std::string column;
};

class IoError : public Error {
public:
    IoError(const std::string& msg, std::string path) : Error(msg), path(std::move(path)) {}
    std::string path;
};

class FitError : public Error {
public:
    FitError(const std::string& msg, double norm = 0.0, int iterations = 0)
        : Error(msg), final_norm(norm), iterations(iterations) {}
    double final_norm;
    int iterations;
};

}  // namespace indexfuse
