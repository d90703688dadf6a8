#pragma once

// Minimal TOML subset reader for run configs: [table] headers, `key = value`
// with strings, integers, floats and booleans, and # comments. Unknown keys
// are rejected by the typed getters' whole-file coverage check.

#include <map>
#include <set>
#include <sstream>
#include <string>

#include "flowlm/common.hpp"

namespace flowlm {

class TomlFile {
public:
    static TomlFile parse(const std::string& text, const std::string& origin = "config") {
        TomlFile f;
        std::istringstream is(text);
        std::string line, table;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            std::string s = strip_(line);
            if (s.empty() || s[0] == '#') continue;
            if (s.front() == '[') {
                require(s.back() == ']', ErrorKind::config,
                        origin + ":" + std::to_string(lineno) + ": malformed table header");
                table = strip_(s.substr(1, s.size() - 2));
                require(!table.empty(), ErrorKind::config, "empty table name");
                continue;
            }
            auto eq = s.find('=');
            require(eq != std::string::npos, ErrorKind::config,
                    origin + ":" + std::to_string(lineno) + ": expected key = value");
            std::string key = strip_(s.substr(0, eq));
            std::string val = strip_(s.substr(eq + 1));
            // trailing comments (outside strings)
            if (!val.empty() && val[0] != '"') {
                auto hash = val.find('#');
                if (hash != std::string::npos) val = strip_(val.substr(0, hash));
            }
            require(!key.empty() && !val.empty(), ErrorKind::config,
                    origin + ":" + std::to_string(lineno) + ": empty key or value");
            std::string full = table.empty() ? key : table + "." + key;
            require(!f.values_.count(full), ErrorKind::config, "duplicate key: " + full);
            f.values_[full] = val;
        }
        return f;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& dflt) {
        if (!has(key)) return dflt;
        used_.insert(key);
        std::string v = values_.at(key);
        if (v.size() >= 2 && v.front() == '"' && v.back() == '"')
            return v.substr(1, v.size() - 2);
        return v;
    }

    int64_t get_int(const std::string& key, int64_t dflt) {
        if (!has(key)) return dflt;
        used_.insert(key);
        const std::string& v = values_.at(key);
        size_t pos = 0;
        int64_t out = 0;
        try {
            out = std::stoll(v, &pos);
        } catch (...) {
            fail(ErrorKind::config, "not an integer: " + key + " = " + v);
        }
        require(pos == v.size(), ErrorKind::config, "not an integer: " + key + " = " + v);
        return out;
    }

    double get_double(const std::string& key, double dflt) {
        if (!has(key)) return dflt;
        used_.insert(key);
        const std::string& v = values_.at(key);
        size_t pos = 0;
        double out = 0;
        try {
            out = std::stod(v, &pos);
        } catch (...) {
            fail(ErrorKind::config, "not a number: " + key + " = " + v);
        }
        require(pos == v.size(), ErrorKind::config, "not a number: " + key + " = " + v);
        return out;
    }

    bool get_bool(const std::string& key, bool dflt) {
        if (!has(key)) return dflt;
        used_.insert(key);
        const std::string& v = values_.at(key);
        if (v == "true") return true;
        if (v == "false") return false;
        fail(ErrorKind::config, "not a boolean: " + key + " = " + v);
    }

    // call after reading every known key; leftovers are configuration errors
    void reject_unknown() const {
        for (const auto& [k, v] : values_)
            require(used_.count(k) > 0, ErrorKind::config, "unknown config key: " + k);
    }

private:
    static std::string strip_(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }

    std::map<std::string, std::string> values_;
    std::set<std::string> used_;
};

}  // namespace flowlm
