#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace uvtm {

/// Runtime failure tagged with the module that raised it ("roadnet", "model", ...).
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& message)
      : std::runtime_error(module + ": " + message), module_(std::move(module)) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

}  // namespace uvtm
