#include "bifair/common.hpp"

#include <cstdlib>
#include <iostream>

namespace bifair {

int log_level() {
  static const int level = [] {
    const char* env = std::getenv("BIFAIR_LOG");
    if (env == nullptr || *env == '\0') return 1;
    return std::atoi(env);
  }();
  return level;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[bifair] " << msg << '\n';
}

void log_warn(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[bifair] warning: " << msg << '\n';
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "[bifair] debug: " << msg << '\n';
}

}  // namespace bifair
