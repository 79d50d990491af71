#include "fulora/log.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <iostream>
#include <mutex>

namespace fulora::log {

namespace {

Level from_env() {
  const char* v = std::getenv("FULORA_LOG");
  if (!v) return Level::Info;
  if (!std::strcmp(v, "debug")) return Level::Debug;
  if (!std::strcmp(v, "warn")) return Level::Warn;
  if (!std::strcmp(v, "error")) return Level::Error;
  if (!std::strcmp(v, "off")) return Level::Off;
  return Level::Info;
}

std::atomic<int>& threshold() {
  static std::atomic<int> t{static_cast<int>(from_env())};
  return t;
}

void emit(Level l, const char* tag, const std::string& msg) {
  if (static_cast<int>(l) < threshold().load()) return;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << '[' << tag << "] " << msg << '\n';
}

}  // namespace

void set_level(Level level) { threshold().store(static_cast<int>(level)); }
Level level() { return static_cast<Level>(threshold().load()); }

void debug(const std::string& msg) { emit(Level::Debug, "debug", msg); }
void info(const std::string& msg) { emit(Level::Info, "info", msg); }
void warn(const std::string& msg) { emit(Level::Warn, "warn", msg); }
void error(const std::string& msg) { emit(Level::Error, "error", msg); }

}  // namespace fulora::log
