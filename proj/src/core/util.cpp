// SPDX-License-Identifier: Apache-2.0

#include "util.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

#include <json.hpp>

namespace cdnet {

namespace {
std::atomic<bool> g_logging{true};
std::mutex g_log_mutex;
}  // namespace

void set_logging(bool enabled) { g_logging = enabled; }

void log_record(std::string_view level, std::string_view msg) {
  if (!g_logging) return;
  nlohmann::json rec{{"level", level}, {"msg", msg}};
  std::lock_guard lock(g_log_mutex);
  std::cerr << rec.dump() << '\n';
}

}  // namespace cdnet
