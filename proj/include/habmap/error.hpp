#pragma once

#include <stdexcept>
#include <string>

namespace habmap {

// Exit-code families used by the command-line tool: usage (1), data (2),
// numerical (3).
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace habmap
