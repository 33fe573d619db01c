#pragma once

// Minimal stderr logger. RHTD_LOG_LEVEL selects error, warn (default), info or debug.

#include <cstdlib>
#include <iostream>
#include <string>

namespace rhtd {

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

inline LogLevel& log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("RHTD_LOG_LEVEL");
    const std::string v = env ? env : "";
    if (v == "error") return LogLevel::Error;
    if (v == "info") return LogLevel::Info;
    if (v == "debug") return LogLevel::Debug;
    return LogLevel::Warn;
  }();
  return level;
}

inline void log_at(LogLevel level, const char* tag, const std::string& msg) {
  if (static_cast<int>(level) <= static_cast<int>(log_level())) std::cerr << "[" << tag << "] " << msg << '\n';
}

inline void log_error(const std::string& msg) { log_at(LogLevel::Error, "error", msg); }
inline void log_warn(const std::string& msg) { log_at(LogLevel::Warn, "warn", msg); }
inline void log_info(const std::string& msg) { log_at(LogLevel::Info, "info", msg); }
inline void log_debug(const std::string& msg) { log_at(LogLevel::Debug, "debug", msg); }

}  // namespace rhtd
