#pragma once

#include <stdexcept>
#include <string>

namespace dualatt {

// Base of every error the library raises. `kind()` is a stable short tag
// used by the CLI to choose an exit code and by tests to match categories.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define DUALATT_ERROR_TYPE(Name, tag)                                          \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(tag, what) {}          \
    }

DUALATT_ERROR_TYPE(DimensionError, "dimension");
DUALATT_ERROR_TYPE(LayoutError, "layout");
DUALATT_ERROR_TYPE(ContractError, "contract");
DUALATT_ERROR_TYPE(ConfigError, "config");
DUALATT_ERROR_TYPE(LabelError, "label");
DUALATT_ERROR_TYPE(ParseError, "parse");
DUALATT_ERROR_TYPE(IoError, "io");
DUALATT_ERROR_TYPE(ConvergenceError, "convergence");
DUALATT_ERROR_TYPE(NumericError, "numeric");
DUALATT_ERROR_TYPE(AttachmentError, "attachment");
DUALATT_ERROR_TYPE(DataError, "data");

#undef DUALATT_ERROR_TYPE

}  // namespace dualatt
