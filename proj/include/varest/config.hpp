/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <string>
#include <vector>

namespace varest {

/// Flat, sectioned key = value configuration.
///
///     # comment
///     seed = 7
///     [model]
///     kind = heat1d
///     n = 50
///
/// Keys are addressed as "section.key"; keys before the first section header
/// live in the top-level section and are addressed by their bare name. Every
/// key must appear in the schema; anything else is a ConfigError.
class Config {
 public:
  static Config parse(std::istream& in, const std::string& origin = "<config>");
  static Config load(const std::string& path);

  /// Applies a "section.key=value" override (schema checked).
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const;
  std::vector<int> get_ints(const std::string& key, std::vector<int> fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  /// Canonical "key = value" listing, sorted by key.
  std::string echo() const;

  static const std::vector<std::string>& schema();

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace varest
