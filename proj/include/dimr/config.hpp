#ifndef DIMR_CONFIG_HPP
#define DIMR_CONFIG_HPP

#include <charconv>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dimr/tensor.hpp"

namespace dimr {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

// deterministic double -> text, shortest representation that round-trips
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

// Flat `key = value` text config. Insertion-ordered so serialization is
// byte-stable; '#' starts a comment.
struct KvConfig {
    std::vector<std::pair<std::string, std::string>> items;

    static KvConfig parse(const std::string& text, const std::string& origin = "<config>") {
        KvConfig c;
        std::istringstream is(text);
        std::string line;
        size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            size_t eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value, got '" + t + "'");
            std::string key = trim(t.substr(0, eq));
            std::string val = trim(t.substr(eq + 1));
            if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            c.set(key, val);
        }
        return c;
    }

    static KvConfig parse_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config: " + path);
        std::ostringstream buf;
        buf << is.rdbuf();
        return parse(buf.str(), path);
    }

    void set(const std::string& key, const std::string& value) {
        for (auto& [k, v] : items)
            if (k == key) {
                v = value;
                return;
            }
        items.emplace_back(key, value);
    }

    // "a.b = c" or "a.b=c" override; last write wins
    void apply_override(const std::string& kv) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + kv + "' must be key=value");
        std::string key = trim(kv.substr(0, eq));
        std::string val = trim(kv.substr(eq + 1));
        if (key.empty()) throw ConfigError("override '" + kv + "' has empty key");
        set(key, val);
    }

    bool has(const std::string& key) const {
        for (const auto& [k, v] : items)
            if (k == key) return true;
        return false;
    }

    std::string get_or(const std::string& key, const std::string& def) const {
        for (const auto& [k, v] : items)
            if (k == key) return v;
        return def;
    }

    double get_double(const std::string& key, double def) const {
        if (!has(key)) return def;
        const std::string v = get_or(key, "");
        try {
            size_t used = 0;
            double d = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': '" + v + "' is not a number");
        }
    }

    long long get_int(const std::string& key, long long def) const {
        if (!has(key)) return def;
        const std::string v = get_or(key, "");
        try {
            size_t used = 0;
            long long n = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return n;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': '" + v + "' is not an integer");
        }
    }

    bool get_bool(const std::string& key, bool def) const {
        if (!has(key)) return def;
        std::string v = get_or(key, "");
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("key '" + key + "': '" + v + "' is not a boolean");
    }

    std::vector<size_t> get_size_list(const std::string& key, std::vector<size_t> def) const {
        if (!has(key)) return def;
        std::string v = get_or(key, "");
        std::vector<size_t> out;
        std::istringstream is(v);
        std::string tok;
        while (std::getline(is, tok, ',')) {
            tok = trim(tok);
            if (tok.empty()) continue;
            try {
                out.push_back(size_t(std::stoull(tok)));
            } catch (const std::exception&) {
                throw ConfigError("key '" + key + "': '" + tok + "' is not a non-negative integer");
            }
        }
        if (out.empty()) throw ConfigError("key '" + key + "': empty list");
        return out;
    }

    // unknown keys are rejected before any work happens
    void require_known(const std::set<std::string>& known) const {
        for (const auto& [k, v] : items)
            if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }

    std::string serialize() const {
        std::ostringstream os;
        for (const auto& [k, v] : items) os << k << " = " << v << "\n";
        return os.str();
    }
};

} // namespace dimr

#endif
