#pragma once

#include <stdexcept>
#include <string>

namespace mechlab {

// Exit-code-bearing error categories; the CLI maps them to process codes.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct PrereqError : std::runtime_error {  // missing input produced by another subcommand
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {  // NaN/Inf encountered
    using std::runtime_error::runtime_error;
};

}  // namespace mechlab
