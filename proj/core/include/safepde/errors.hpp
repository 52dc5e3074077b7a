#pragma once

#include <stdexcept>
#include <string>

namespace safepde {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class SimulationDiverged : public Error {
public:
    SimulationDiverged(int step, const std::string& what)
        : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

class FormatError : public Error {
public:
    using Error::Error;
};

// Violated precondition on cached state (e.g. stale operator activations).
class ContractError : public Error {
public:
    using Error::Error;
};

class InfeasibleStep : public Error {
public:
    InfeasibleStep(int step, const std::string& what)
        : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

}  // namespace safepde
