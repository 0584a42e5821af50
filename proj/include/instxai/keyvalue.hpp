#pragma once

// Plain-text "key = value" configuration files. '#' starts a comment line.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>

#include "instxai/tensor.hpp"

namespace instxai {

class config_error : public error {
 public:
  using error::error;
};

class KeyValues {
 public:
  static KeyValues parse(std::istream& is, const std::string& origin = "<stream>") {
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos || line[b] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw config_error(origin + ":" + std::to_string(lineno) + ": expected key = value");
      kv.values_[strip(line.substr(0, eq))] = strip(line.substr(eq + 1));
    }
    return kv;
  }

  static KeyValues load(const std::filesystem::path& p) {
    std::ifstream is(p);
    if (!is) throw config_error("cannot open config " + p.string());
    return parse(is, p.string());
  }

  bool has(const std::string& k) const { return values_.count(k) != 0; }
  const std::string& get(const std::string& k) const {
    auto it = values_.find(k);
    if (it == values_.end()) throw config_error("missing config key '" + k + "'");
    return it->second;
  }
  std::string get(const std::string& k, const std::string& def) const {
    return has(k) ? get(k) : def;
  }

  double get_double(const std::string& k, double def) const {
    if (!has(k)) return def;
    std::size_t pos = 0;
    const std::string& v = get(k);
    double d;
    try {
      d = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw config_error("config key '" + k + "': not a number: " + v);
    }
    if (pos != v.size()) throw config_error("config key '" + k + "': not a number: " + v);
    return d;
  }

  int get_int(const std::string& k, int def) const {
    if (!has(k)) return def;
    const double d = get_double(k, def);
    if (d != double(static_cast<long long>(d)))
      throw config_error("config key '" + k + "': not an integer");
    return int(d);
  }

  void set(const std::string& k, const std::string& v) { values_[k] = v; }
  void set(const std::string& k, double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    values_[k] = os.str();
  }
  void set(const std::string& k, int v) { values_[k] = std::to_string(v); }

  void merge(const KeyValues& o) {
    for (const auto& [k, v] : o.values_) values_[k] = v;
  }

  const std::map<std::string, std::string>& items() const { return values_; }

  std::string str() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

 private:
  static std::string strip(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace instxai
