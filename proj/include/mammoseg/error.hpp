#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace mammoseg {

// Domain failure carrying a module-qualified code such as "ingest.MissingMetadata".
// The CLI prints the code verbatim and maps it to exit status 1.
class Error : public std::runtime_error {
public:
    Error(std::string module, std::string kind, const std::string& detail)
        : std::runtime_error(module + "." + kind + ": " + detail),
          module_(std::move(module)),
          kind_(std::move(kind)) {}

    const std::string& module() const noexcept { return module_; }
    const std::string& kind() const noexcept { return kind_; }
    std::string code() const { return module_ + "." + kind_; }

private:
    std::string module_;
    std::string kind_;
};

inline bool is_error(const Error& e, std::string_view kind) { return e.kind() == kind; }

}  // namespace mammoseg
