#pragma once

#include <stdexcept>
#include <string>

namespace qbev {

// Machine-parseable error codes. CLI prints "error: <code>: <message>" and
// exits nonzero; library code throws QbError.
enum class ErrCode {
  contract,        // precondition / shape violation
  io,              // file not readable/writable
  version,         // record or checkpoint format version mismatch
  corrupt,         // bad magic / truncated record
  count_mismatch,  // manifest count disagrees with directory contents
  generation,      // placement failure in world generation
  usage,           // bad CLI arguments
};

inline const char* err_code_name(ErrCode c) {
  switch (c) {
    case ErrCode::contract: return "E_CONTRACT";
    case ErrCode::io: return "E_IO";
    case ErrCode::version: return "E_VERSION";
    case ErrCode::corrupt: return "E_CORRUPT";
    case ErrCode::count_mismatch: return "E_COUNT_MISMATCH";
    case ErrCode::generation: return "E_GENERATION";
    case ErrCode::usage: return "E_USAGE";
  }
  return "E_UNKNOWN";
}

class QbError : public std::runtime_error {
 public:
  QbError(ErrCode code, const std::string& msg)
      : std::runtime_error(std::string(err_code_name(code)) + ": " + msg), code_(code) {}
  ErrCode code() const { return code_; }

 private:
  ErrCode code_;
};

inline void check(bool cond, ErrCode code, const std::string& msg) {
  if (!cond) throw QbError(code, msg);
}

inline void check_contract(bool cond, const std::string& msg) {
  check(cond, ErrCode::contract, msg);
}

}  // namespace qbev
