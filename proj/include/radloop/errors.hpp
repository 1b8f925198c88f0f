#pragma once

#include <stdexcept>
#include <string>

namespace radloop {

// Error categories shared by every module. The HTTP layer maps them onto
// status codes (invalid-input 400, not-found 404, conflict 409).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* code() const noexcept = 0;
};

class InvalidInput : public Error {
public:
    using Error::Error;
    const char* code() const noexcept override { return "invalid-input"; }
};

class UnknownLabel : public InvalidInput {
public:
    explicit UnknownLabel(const std::string& label)
        : InvalidInput("unknown label '" + label + "'") {}
    const char* code() const noexcept override { return "unknown-label"; }
};

class NotFound : public Error {
public:
    using Error::Error;
    const char* code() const noexcept override { return "not-found"; }
};

class Conflict : public Error {
public:
    using Error::Error;
    const char* code() const noexcept override { return "conflict"; }
};

class UndefinedMetric : public Error {
public:
    using Error::Error;
    const char* code() const noexcept override { return "undefined-metric"; }
};

}  // namespace radloop
