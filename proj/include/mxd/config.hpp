#pragma once

// Sectioned key = value run configuration with a fixed schema. Unknown
// sections or keys are errors. Every key has a default.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mxd/error.hpp"

namespace mxd {

struct ConfigKey {
    std::string section;
    std::string key;
    std::string default_value;
};

inline const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> schema = {
        {"run", "seed", "0"},
        {"run", "out", "out"},
        {"run", "threads", "1"},
        {"run", "dtype", "f32"},

        {"corpus", "path", ""},
        {"corpus", "synthetic_bytes", "0"},

        {"lm", "d", "64"},
        {"lm", "blocks", "2"},
        {"lm", "heads", "2"},
        {"lm", "ctx", "64"},
        {"lm", "mlp_hidden", "256"},
        {"lm", "steps", "2000"},
        {"lm", "batch", "8"},
        {"lm", "lr", "0.003"},
        {"lm", "holdout", "0.1"},
        {"lm", "eval_every", "250"},
        {"lm", "eval_windows", "32"},

        {"teacher", "source", "synthetic"},
        {"teacher", "kind", "mlp_gelu"},
        {"teacher", "input", "64"},
        {"teacher", "hidden", "256"},
        {"teacher", "output", "64"},
        {"teacher", "pairs", "200000"},
        {"teacher", "eval_pairs", "4000"},
        {"teacher", "lm_checkpoint", ""},
        {"teacher", "layer", "1"},

        {"student", "kinds", "tc,mxd"},
        {"student", "k", "4,8,16,32"},
        {"student", "expansion", "8"},
        {"student", "rank", "0"},
        {"student", "biases", "true"},
        {"student", "enc_act", "gelu"},
        {"student", "k_mode", "fixed"},
        {"student", "k_divisor", "2"},

        {"train", "steps", "20000"},
        {"train", "batch", "32"},
        {"train", "lr", "0.001"},
        {"train", "eval_every", "1000"},
        {"train", "eval_rows", "4000"},
        {"train", "frequency_window", "100000"},

        {"eval", "checkpoint", ""},
        {"eval", "suites", "nmse"},
        {"eval", "horizon", "16"},
        {"eval", "prompts", "512"},
        {"eval", "prompt_length", "32"},
        {"eval", "rank_sample", "500"},
        {"eval", "unit", "0"},
        {"eval", "lambda", "100"},
        {"eval", "probe_examples", "1000"},

        {"sweep", "seeds", "0,1,2"},

        {"spec", "kind", ""},
        {"spec", "input", "0"},
        {"spec", "hidden", "0"},
        {"spec", "output", "0"},
        {"spec", "experts", "0"},
        {"spec", "match_tc_hidden", "0"},
        {"spec", "rank", "0"},
        {"spec", "k", "0"},
        {"spec", "biases", "true"},
    };
    return schema;
}

class Config {
public:
    Config() {
        for (const auto& k : config_schema()) values_[k.section + "." + k.key] = k.default_value;
    }

    static Config parse(std::string_view text, const std::string& origin = "<config>") {
        // '#' comments are accepted in addition to the INI ';' form.
        std::ostringstream cleaned;
        std::istringstream in{std::string(text)};
        for (std::string line; std::getline(in, line);) {
            const auto first = line.find_first_not_of(" \t");
            cleaned << (first != std::string::npos && line[first] == '#' ? "" : line) << '\n';
        }
        boost::property_tree::ptree tree;
        std::istringstream src(cleaned.str());
        try {
            boost::property_tree::read_ini(src, tree);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
        }
        Config cfg;
        for (const auto& [section, body] : tree) {
            if (body.empty() && !body.data().empty())
                throw ConfigError(origin + ": key '" + section + "' must be inside a [section]");
            if (!body.empty() && !cfg.has_section(section))
                throw ConfigError(origin + ": unknown section [" + section + "]");
            for (const auto& [key, value] : body) {
                const std::string full = section + "." + key;
                if (!cfg.values_.count(full)) throw ConfigError(origin + ": unknown key '" + key + "' in [" + section + "]");
                cfg.values_[full] = value.data();
            }
            if (body.empty() && !cfg.has_section(section))
                throw ConfigError(origin + ": unknown section [" + section + "]");
        }
        return cfg;
    }

    static Config load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path.string());
    }

    void set(const std::string& key, std::string value) {
        if (!values_.count(key)) throw ConfigError("unknown key '" + key + "'");
        values_[key] = std::move(value);
    }

    const std::string& str(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
        return it->second;
    }

    /// Non-empty string value; names the key when missing.
    const std::string& required(const std::string& key) const {
        const auto& v = str(key);
        if (v.empty()) throw ConfigError("missing required key '" + key + "'");
        return v;
    }

    std::uint64_t u64(const std::string& key) const { return parse_u64(key, str(key)); }

    std::size_t count(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

    double real(const std::string& key) const {
        const auto& v = str(key);
        try {
            std::size_t pos = 0;
            const double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("trailing");
            return d;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
        }
    }

    bool flag(const std::string& key) const {
        const auto& v = str(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("key '" + key + "' expects true/false, got '" + v + "'");
    }

    std::vector<std::string> list(const std::string& key) const {
        std::vector<std::string> out;
        std::string item;
        std::istringstream in(str(key));
        while (std::getline(in, item, ',')) {
            item.erase(0, item.find_first_not_of(" \t"));
            item.erase(item.find_last_not_of(" \t") + 1);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    std::vector<std::uint64_t> u64_list(const std::string& key) const {
        std::vector<std::uint64_t> out;
        for (const auto& s : list(key)) out.push_back(parse_u64(key, s));
        return out;
    }

    /// Every key with its effective value, in schema order.
    std::string resolved() const {
        std::ostringstream os;
        std::string section;
        for (const auto& k : config_schema()) {
            if (k.section != section) {
                if (!section.empty()) os << '\n';
                section = k.section;
                os << '[' << section << "]\n";
            }
            os << k.key << " = " << values_.at(k.section + "." + k.key) << '\n';
        }
        return os.str();
    }

    void write_resolved(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        std::ofstream out(dir / "resolved.cfg");
        out << resolved();
        if (!out) throw std::runtime_error("cannot write " + (dir / "resolved.cfg").string());
    }

private:
    static std::uint64_t parse_u64(const std::string& key, const std::string& v) {
        std::uint64_t out = 0;
        const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || ptr != v.data() + v.size())
            throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + v + "'");
        return out;
    }

    bool has_section(const std::string& s) const {
        return std::any_of(config_schema().begin(), config_schema().end(), [&](const auto& k) { return k.section == s; });
    }

    std::map<std::string, std::string> values_;
};

} // namespace mxd
