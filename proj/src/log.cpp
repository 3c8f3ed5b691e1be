#include "fens/log.hpp"

#include <atomic>
#include <cstdio>
#include <mutex>

namespace fens::log {

namespace {

std::atomic<Level> g_level{Level::kWarn};
std::mutex g_mutex;

const char* name(Level l) {
  switch (l) {
    case Level::kWarn: return "warn";
    case Level::kInfo: return "info";
    case Level::kDebug: return "debug";
    default: return "quiet";
  }
}

// Values with spaces or quotes are quoted so lines stay splittable.
std::string quote(const std::string& v) {
  if (!v.empty() && v.find_first_of(" \t\"=") == std::string::npos) return v;
  std::string out = "\"";
  for (char c : v) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void write(Level l, std::string_view event, std::initializer_list<Field> fields) {
  if (l == Level::kQuiet || static_cast<int>(l) > static_cast<int>(g_level.load())) return;
  std::string line = "level=";
  line += name(l);
  line += " event=";
  line += event;
  for (const auto& [k, v] : fields) {
    line += ' ';
    line += k;
    line += '=';
    line += quote(v);
  }
  line += '\n';
  std::lock_guard lock(g_mutex);
  std::fputs(line.c_str(), stderr);
}

std::string num(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

}  // namespace fens::log
