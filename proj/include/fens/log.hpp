#pragma once

#include <initializer_list>
#include <string>
#include <string_view>
#include <utility>

// Line-oriented key=value records on stderr, e.g.
//   level=info event=train.epoch run=synth-mobile-tfs-fold0-1 epoch=3 val_acc=0.91
namespace fens::log {

enum class Level { kQuiet = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

using Field = std::pair<std::string_view, std::string>;

void set_level(Level level);
Level level();

void write(Level level, std::string_view event, std::initializer_list<Field> fields = {});

inline void warn(std::string_view event, std::initializer_list<Field> fields = {}) {
  write(Level::kWarn, event, fields);
}
inline void info(std::string_view event, std::initializer_list<Field> fields = {}) {
  write(Level::kInfo, event, fields);
}
inline void debug(std::string_view event, std::initializer_list<Field> fields = {}) {
  write(Level::kDebug, event, fields);
}

// Fixed-precision number formatting for log values.
std::string num(double v, int precision = 6);

}  // namespace fens::log
