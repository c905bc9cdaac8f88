#pragma once

#include <stdexcept>
#include <string>

namespace trace_diag {

// Bad inputs: missing files, malformed formats, out-of-range arguments.
// The CLI maps these to exit code 1.
class validation_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A computation could not proceed on otherwise well-formed inputs
// (degenerate matrices, undefined metrics). CLI exit code 2.
class computation_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Binary container violations; carries the byte offset of the failure.
class format_error : public validation_error {
public:
    format_error(const std::string& what, std::size_t offset)
        : validation_error(what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace trace_diag
