#pragma once

#include <stdexcept>
#include <string>

namespace forge {

enum class ErrorKind {
    config,      // invalid spec / config document
    input,       // bad argument shape or range
    load,        // checkpoint archive problems
    plan,        // invalid surgery plan
    surgery,     // plan does not match the model
    graft,       // encoder/decoder width mismatch
    assembly,    // chat template violation
    tokenize,    // character outside the alphabet
    detection,   // transition detection precondition
    data,        // missing or malformed corpus
    numeric,     // non-finite loss
    protocol,    // missing evaluation condition / stage ordering
};

const char * error_kind_name(ErrorKind kind);

// CLI exit code for an error kind: 2 config, 3 data, 4 numeric, 5 protocol.
int exit_code_for(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string & message)
        : std::runtime_error(std::string(error_kind_name(kind)) + " error: " + message), kind_(kind), detail_(message) {}

    ErrorKind kind() const noexcept { return kind_; }
    const std::string & detail() const noexcept { return detail_; }

private:
    ErrorKind kind_;
    std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string & message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string & message) {
    if (!condition) {
        fail(kind, message);
    }
}

} // namespace forge
