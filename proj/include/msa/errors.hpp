#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace msa {

enum class ErrorKind {
  kShape,     // tensor dimension mismatch
  kConfig,    // bad configuration value or key
  kInput,     // invalid runtime input (ids, masks, queries)
  kIo,        // file format / filesystem failure
  kNumeric,   // non-finite value where a finite one is required
  kContract,  // API precondition violated
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

namespace detail {
inline void append_all(std::ostringstream&) {}
template <class T, class... Rest>
void append_all(std::ostringstream& os, const T& value, const Rest&... rest) {
  os << value;
  append_all(os, rest...);
}
}  // namespace detail

template <class... Args>
[[noreturn]] void fail(ErrorKind kind, const Args&... args) {
  std::ostringstream os;
  detail::append_all(os, args...);
  throw Error(kind, os.str());
}

}  // namespace msa

#define MSA_CHECK(cond, kind, ...)             \
  do {                                         \
    if (!(cond)) ::msa::fail(kind, __VA_ARGS__); \
  } while (0)
