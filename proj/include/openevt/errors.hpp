#ifndef OPENEVT_ERRORS_HPP
#define OPENEVT_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace openevt {

// Named, recoverable error. `name` is a stable machine-readable token
// (e.g. "ambiguous_point", "off_support"); the CLI surfaces it, together
// with the originating module, in the run manifest.
class NamedError : public std::runtime_error {
 public:
  NamedError(std::string name, std::string module, const std::string& what)
      : std::runtime_error(what),
        name_(std::move(name)),
        module_(std::move(module)) {}

  const std::string& name() const { return name_; }
  const std::string& module_name() const { return module_; }

 private:
  std::string name_;
  std::string module_;
};

[[noreturn]] inline void fail(const char* name, const char* module,
                              const std::string& what) {
  throw NamedError(name, module, what);
}

}  // namespace openevt

#endif
