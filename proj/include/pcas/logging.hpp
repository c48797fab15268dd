#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

namespace pcas {

// Error type thrown by every module. The CLI maps it to a nonzero exit code.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

void log_warn(const std::string& msg);
void log_info(const std::string& msg);
void set_log_quiet(bool quiet);

// Process-wide event counters. Degenerate-but-legal situations (skipped
// all-zero target rows, no-positive CMCC batches, skipped decoder steps)
// increment a named counter instead of failing; tests assert on them.
namespace counters {
void increment(const std::string& name, int64_t by = 1);
int64_t value(const std::string& name);
void reset();
const std::map<std::string, int64_t>& all();
}  // namespace counters

}  // namespace pcas
