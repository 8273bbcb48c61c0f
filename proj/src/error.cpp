#include "expecta/error.hpp"

#include <cmath>
#include <numbers>

#include "expecta/rng.hpp"

namespace expecta {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::specification: return "specification error";
    case ErrorKind::render_domain: return "render-domain error";
    case ErrorKind::no_foreground: return "no-foreground error";
    case ErrorKind::format: return "format error";
    case ErrorKind::undefined_overlap: return "undefined-overlap error";
    case ErrorKind::missing_class: return "missing-class error";
    case ErrorKind::dimension: return "dimension mismatch";
    case ErrorKind::training_failure: return "training failure";
    case ErrorKind::empty_input: return "empty input";
    case ErrorKind::mapping: return "mapping error";
    case ErrorKind::missing_artifact: return "missing artifact";
    case ErrorKind::stale_artifact: return "stale artifact";
    case ErrorKind::config: return "config error";
    }
    return "error";
}

double Rng::normal(double mean, double stddev) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

} // namespace expecta
