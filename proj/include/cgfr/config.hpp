#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "cgfr/common.hpp"

namespace cgfr {

/// Flat key=value run configuration. Every key has a default; setting or
/// loading an unknown key raises ConfigError. Values are stored as strings
/// and converted on access.
class RunConfig {
public:
    /// Config with every key at its default.
    static RunConfig defaults();

    /// Parses a UTF-8 key=value file ('#' starts a comment line).
    void load_file(const std::string& path);
    /// Parses one "key=value" assignment.
    void set_line(const std::string& line);
    void set(const std::string& key, const std::string& value);

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    const std::string& get_s(const std::string& key) const;
    double get_f(const std::string& key) const;
    int get_i(const std::string& key) const;
    std::int64_t get_i64(const std::string& key) const;
    bool get_b(const std::string& key) const;

    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace cgfr
