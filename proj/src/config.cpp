// SPDX-License-Identifier: Apache-2.0
#include "slategen/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace slategen {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + want);
}

template <class T>
T parse_number(const std::string& key, const std::string& text, const char* want) {
  const std::string v = trim(text);
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, text, want);
  return out;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(trim(item));
  if (parts.size() == 1 && parts[0].empty()) parts.clear();
  return parts;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    if constexpr (std::is_same_v<T, double>)
      out += format_double(v[i]);
    else
      out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

void ConfigSchema::bind(const std::string& key, bool& target) {
  fields_[key] = {[key, &target](const std::string& v) {
                    const std::string t = trim(v);
                    if (t == "true" || t == "1" || t == "on")
                      target = true;
                    else if (t == "false" || t == "0" || t == "off")
                      target = false;
                    else
                      bad_value(key, v, "bool");
                  },
                  [&target] { return std::string(target ? "true" : "false"); }};
}

void ConfigSchema::bind(const std::string& key, int& target) {
  fields_[key] = {[key, &target](const std::string& v) { target = parse_number<int>(key, v, "integer"); },
                  [&target] { return std::to_string(target); }};
}

void ConfigSchema::bind(const std::string& key, std::size_t& target) {
  fields_[key] = {
      [key, &target](const std::string& v) { target = parse_number<std::size_t>(key, v, "non-negative integer"); },
      [&target] { return std::to_string(target); }};
}

void ConfigSchema::bind(const std::string& key, double& target) {
  fields_[key] = {[key, &target](const std::string& v) { target = parse_number<double>(key, v, "real"); },
                  [&target] { return format_double(target); }};
}

void ConfigSchema::bind(const std::string& key, std::string& target) {
  fields_[key] = {[&target](const std::string& v) { target = trim(v); }, [&target] { return target; }};
}

void ConfigSchema::bind(const std::string& key, std::vector<double>& target) {
  fields_[key] = {[key, &target](const std::string& v) {
                    std::vector<double> out;
                    for (const auto& p : split_list(v)) out.push_back(parse_number<double>(key, p, "real list"));
                    target = std::move(out);
                  },
                  [&target] { return join(target); }};
}

void ConfigSchema::bind(const std::string& key, std::vector<std::size_t>& target) {
  fields_[key] = {[key, &target](const std::string& v) {
                    std::vector<std::size_t> out;
                    for (const auto& p : split_list(v))
                      out.push_back(parse_number<std::size_t>(key, p, "integer list"));
                    target = std::move(out);
                  },
                  [&target] { return join(target); }};
}

void ConfigSchema::set(const std::string& key, const std::string& value) {
  const auto it = fields_.find(key);
  if (it == fields_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(value);
}

std::string ConfigSchema::get(const std::string& key) const {
  const auto it = fields_.find(key);
  if (it == fields_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get();
}

void ConfigSchema::load_text(const std::string& text, const std::string& origin) {
  std::stringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string name = trim(line.substr(0, eq));
    const std::string key = section.empty() ? name : section + "." + name;
    try {
      set(key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

void ConfigSchema::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), path);
}

std::string ConfigSchema::resolved() const {
  std::string out, section;
  for (const auto& [key, field] : fields_) {
    const auto dot = key.find('.');
    const std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
    if (sec != section || out.empty()) {
      if (!out.empty()) out += "\n";
      if (!sec.empty()) out += "[" + sec + "]\n";
      section = sec;
    }
    out += name + " = " + field.get() + "\n";
  }
  return out;
}

}  // namespace slategen
