#pragma once

#include <string>

namespace fulora::log {

enum class Level { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

/// Threshold defaults to Info, or FULORA_LOG (debug|info|warn|error|off).
void set_level(Level level);
Level level();

void debug(const std::string& msg);
void info(const std::string& msg);
void warn(const std::string& msg);
void error(const std::string& msg);

}  // namespace fulora::log
