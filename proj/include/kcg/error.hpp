// Error type shared by all modules: a short greppable code plus a message.
#pragma once
#include <stdexcept>
#include <string>
#include <utility>

namespace kcg {

class error : public std::runtime_error {
public:
  error(std::string code, std::string message)
      : std::runtime_error(code + ": " + message),
        code_(std::move(code)),
        message_(std::move(message)) {}
  const std::string& code() const noexcept { return code_; }
  const std::string& message() const noexcept { return message_; }

private:
  std::string code_;
  std::string message_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& msg) {
  throw error(code, msg);
}

inline void require(bool ok, const std::string& code, const std::string& msg) {
  if (!ok) fail(code, msg);
}

}  // namespace kcg
