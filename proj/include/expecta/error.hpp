#pragma once

#include <stdexcept>
#include <string>

namespace expecta {

enum class ErrorKind {
    specification,
    render_domain,
    no_foreground,
    format,
    undefined_overlap,
    missing_class,
    dimension,
    training_failure,
    empty_input,
    mapping,
    missing_artifact,
    stale_artifact,
    config,
};

const char* to_string(ErrorKind kind) noexcept;

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

} // namespace expecta
