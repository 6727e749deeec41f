// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace slategen {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shortest round-trip text for a double.
std::string format_double(double v);

/// Registry of typed configuration keys ("section.key") bound to struct
/// members. Text form:
///
///   # comment
///   [model]
///   d_model = 64
///   layer_weights = 1, 0.1, 0.01
///
/// Unknown keys and unparsable values raise ConfigError.
class ConfigSchema {
 public:
  void bind(const std::string& key, bool& target);
  void bind(const std::string& key, int& target);
  void bind(const std::string& key, std::size_t& target);
  void bind(const std::string& key, double& target);
  void bind(const std::string& key, std::string& target);
  void bind(const std::string& key, std::vector<double>& target);
  void bind(const std::string& key, std::vector<std::size_t>& target);

  bool has(const std::string& key) const { return fields_.count(key) != 0; }
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// Applies a config text. origin names the source in error messages.
  void load_text(const std::string& text, const std::string& origin);
  void load_file(const std::string& path);

  /// Every key with its current value, grouped by section in sorted order.
  /// Loading this text back reproduces the same values.
  std::string resolved() const;

 private:
  struct Field {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };
  std::map<std::string, Field> fields_;
};

}  // namespace slategen
