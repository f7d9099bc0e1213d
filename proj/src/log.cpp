#include "wssod/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace wssod {

namespace {
std::atomic<int> g_level{static_cast<int>(LogLevel::kInfo)};
std::mutex g_mutex;
}  // namespace

void set_log_level(LogLevel level) { g_level = static_cast<int>(level); }
LogLevel log_level() { return static_cast<LogLevel>(g_level.load()); }

void log_info(const std::string& msg) {
  if (g_level < static_cast<int>(LogLevel::kInfo)) return;
  std::lock_guard lock(g_mutex);
  std::cerr << msg << '\n';
}

void log_warn(const std::string& msg) {
  if (g_level < static_cast<int>(LogLevel::kWarn)) return;
  std::lock_guard lock(g_mutex);
  std::cerr << "warning: " << msg << '\n';
}

}  // namespace wssod
