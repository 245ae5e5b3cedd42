// SPDX-License-Identifier: Apache-2.0
//
// Flat `key = value` configuration files with `#` comments.
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "peftlab/errors.hpp"

namespace peftlab {

/// Shortest decimal that round-trips to the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace detail {
inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}
}  // namespace detail

class KeyValueConfig {
public:
    static KeyValueConfig parse(std::istream& in, const std::string& origin = "<config>") {
        KeyValueConfig cfg;
        cfg.origin_ = origin;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            const auto body = detail::trim(std::string_view(line).substr(0, hash));
            if (body.empty()) {
                continue;
            }
            const auto eq = body.find('=');
            if (eq == std::string::npos) {
                throw parse_error(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
            }
            auto key = detail::trim(std::string_view(body).substr(0, eq));
            auto value = detail::trim(std::string_view(body).substr(eq + 1));
            if (key.empty()) {
                throw parse_error(origin + ":" + std::to_string(lineno) + ": empty key");
            }
            if (cfg.values_.count(key)) {
                throw parse_error(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
            }
            cfg.order_.push_back(key);
            cfg.lines_[key] = lineno;
            cfg.values_[key] = std::move(value);
        }
        return cfg;
    }

    static KeyValueConfig parse_string(const std::string& text, const std::string& origin = "<config>") {
        std::istringstream in(text);
        return parse(in, origin);
    }

    static KeyValueConfig load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) {
            throw io_error("cannot read config " + path.string());
        }
        return parse(in, path.string());
    }

    void set(const std::string& key, std::string value) {
        if (!values_.count(key)) {
            order_.push_back(key);
        }
        values_[key] = std::move(value);
    }

    std::string to_string() const {
        std::string out;
        for (const auto& k : order_) {
            out += k + " = " + values_.at(k) + "\n";
        }
        return out;
    }

    void write(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        out << to_string();
        if (!out) {
            throw io_error("cannot write " + path.string());
        }
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key) const { return raw(key); }
    std::string get_string(const std::string& key, const std::string& fallback) const {
        return has(key) ? raw(key) : fallback;
    }

    std::uint64_t get_u64(const std::string& key) const { return number<std::uint64_t>(key); }
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        return has(key) ? get_u64(key) : fallback;
    }
    std::size_t get_size(const std::string& key) const { return number<std::size_t>(key); }
    std::size_t get_size(const std::string& key, std::size_t fallback) const {
        return has(key) ? get_size(key) : fallback;
    }
    double get_double(const std::string& key) const { return number<double>(key); }
    double get_double(const std::string& key, double fallback) const {
        return has(key) ? get_double(key) : fallback;
    }
    bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) {
            return fallback;
        }
        const auto v = raw(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw config_error(where(key) + ": '" + key + "' must be true or false, got '" + v + "'");
    }

    /// Comma-separated list; blanks around items are ignored.
    std::vector<std::string> get_list(const std::string& key) const {
        std::vector<std::string> out;
        std::istringstream is(raw(key));
        std::string item;
        while (std::getline(is, item, ',')) {
            item = detail::trim(item);
            if (!item.empty()) {
                out.push_back(item);
            }
        }
        return out;
    }

    template <class N>
    std::vector<N> get_number_list(const std::string& key) const {
        std::vector<N> out;
        for (const auto& item : get_list(key)) {
            out.push_back(to_number<N>(key, item));
        }
        return out;
    }

    /// Throws if any key was never read.
    void reject_unknown() const {
        for (const auto& k : order_) {
            if (!used_.count(k)) {
                throw config_error(where(k) + ": unknown key '" + k + "'");
            }
        }
    }

private:
    std::string where(const std::string& key) const {
        auto it = lines_.find(key);
        return it == lines_.end() ? origin_ : origin_ + ":" + std::to_string(it->second);
    }

    std::string raw(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) {
            throw config_error(origin_ + ": missing required key '" + key + "'");
        }
        used_.insert(key);
        return it->second;
    }

    template <class N>
    N to_number(const std::string& key, const std::string& text) const {
        N v{};
        const auto* end = text.data() + text.size();
        auto res = std::from_chars(text.data(), end, v);
        if (res.ec != std::errc() || res.ptr != end) {
            throw config_error(where(key) + ": '" + key + "' expects a number, got '" + text + "'");
        }
        return v;
    }

    template <class N>
    N number(const std::string& key) const {
        return to_number<N>(key, raw(key));
    }

    std::string origin_ = "<config>";
    std::vector<std::string> order_;
    std::map<std::string, std::string> values_;
    std::map<std::string, std::size_t> lines_;
    mutable std::set<std::string> used_;
};

}  // namespace peftlab
