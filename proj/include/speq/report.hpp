#pragma once

// Run reports: one record per line, "<kind> key=value key=value ...".
// Floats print in shortest round-trip form so identical runs produce
// identical bytes.

#include <fmt/format.h>

#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace speq {

class Record {
public:
    explicit Record(std::string_view kind) : line_(kind) {}

    Record& add(std::string_view key, std::string_view value) {
        line_ += fmt::format(" {}={}", key, value);
        return *this;
    }
    Record& add(std::string_view key, const char* value) { return add(key, std::string_view(value)); }
    Record& add(std::string_view key, const std::string& value) { return add(key, std::string_view(value)); }
    Record& add(std::string_view key, bool value) { return add(key, std::string_view(value ? "true" : "false")); }
    template <typename T>
        requires std::is_arithmetic_v<T>
    Record& add(std::string_view key, T value) {
        line_ += fmt::format(" {}={}", key, value);
        return *this;
    }

    const std::string& str() const noexcept { return line_; }

private:
    std::string line_;
};

class Report {
public:
    Record& record(std::string_view kind) { return records_.emplace_back(kind); }

    void write(std::ostream& os) const {
        for (const auto& r : records_) os << r.str() << '\n';
    }

    std::string str() const {
        std::string s;
        for (const auto& r : records_) {
            s += r.str();
            s += '\n';
        }
        return s;
    }

private:
    std::vector<Record> records_;
};

}  // namespace speq
