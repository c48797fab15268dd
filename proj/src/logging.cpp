#include "pcas/logging.hpp"

#include <iostream>

namespace pcas {

namespace {
bool g_quiet = false;
std::map<std::string, int64_t> g_counters;
}  // namespace

void set_log_quiet(bool quiet) { g_quiet = quiet; }

void log_warn(const std::string& msg) {
  if (!g_quiet) std::cerr << "[warn] " << msg << "\n";
}

void log_info(const std::string& msg) {
  if (!g_quiet) std::cerr << "[info] " << msg << "\n";
}

namespace counters {

void increment(const std::string& name, int64_t by) { g_counters[name] += by; }

int64_t value(const std::string& name) {
  auto it = g_counters.find(name);
  return it == g_counters.end() ? 0 : it->second;
}

void reset() { g_counters.clear(); }

const std::map<std::string, int64_t>& all() { return g_counters; }

}  // namespace counters

}  // namespace pcas
