#pragma once

// Single-line key=value logging to stderr. The level comes from
// CAGS_LOG_LEVEL (error, warn, info, debug; default info).

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cags::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

inline const char* name(Level l) {
    switch (l) {
        case Level::error: return "error";
        case Level::warn: return "warn";
        case Level::info: return "info";
        case Level::debug: return "debug";
    }
    return "info";
}

inline Level threshold() {
    static const Level lvl = [] {
        const char* env = std::getenv("CAGS_LOG_LEVEL");
        const std::string s = env ? env : "";
        if (s == "error") return Level::error;
        if (s == "warn") return Level::warn;
        if (s == "debug") return Level::debug;
        return Level::info;
    }();
    return lvl;
}

using Fields = std::vector<std::pair<std::string, std::string>>;

inline std::string quote_if_needed(std::string_view v) {
    if (!v.empty() && v.find_first_of(" \t\"=\n") == std::string_view::npos) return std::string(v);
    std::string out = "\"";
    for (char c : v) {
        if (c == '"' || c == '\\') out += '\\';
        out += c == '\n' ? ' ' : c;
    }
    return out + "\"";
}

template <class T>
std::string str(const T& v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

inline void emit(Level l, std::string_view event, const Fields& fields = {}) {
    if (static_cast<int>(l) > static_cast<int>(threshold())) return;
    std::string line = "level=" + std::string(name(l)) + " event=" + quote_if_needed(event);
    for (const auto& [k, v] : fields) line += " " + k + "=" + quote_if_needed(v);
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    std::cerr << line << '\n';
}

inline void error(std::string_view e, const Fields& f = {}) { emit(Level::error, e, f); }
inline void warn(std::string_view e, const Fields& f = {}) { emit(Level::warn, e, f); }
inline void info(std::string_view e, const Fields& f = {}) { emit(Level::info, e, f); }
inline void debug(std::string_view e, const Fields& f = {}) { emit(Level::debug, e, f); }

}  // namespace cags::log
