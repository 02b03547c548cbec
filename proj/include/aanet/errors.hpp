#pragma once

#include <stdexcept>
#include <string>

namespace aanet {

// Root of every error thrown by the library. `kind()` is a stable tag used in
// machine-readable error records written by the CLI.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define AANET_DEFINE_ERROR(Name, tag)                                           \
    class Name : public Error {                                                 \
    public:                                                                     \
        explicit Name(const std::string& what) : Error(tag, what) {}           \
    };

AANET_DEFINE_ERROR(DimensionError, "dimension")
AANET_DEFINE_ERROR(ConfigError, "config")
AANET_DEFINE_ERROR(ArgumentError, "argument")
AANET_DEFINE_ERROR(DataError, "data")
AANET_DEFINE_ERROR(StateError, "state")
AANET_DEFINE_ERROR(NumericError, "numeric")
AANET_DEFINE_ERROR(ProtocolError, "protocol")
AANET_DEFINE_ERROR(FormatError, "format")
AANET_DEFINE_ERROR(TrainingError, "training")

#undef AANET_DEFINE_ERROR

}  // namespace aanet
