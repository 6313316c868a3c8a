/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

// varest run <config> [--override k=v ...] [--out <dir>]

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "varest/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"a-posteriori error estimation for 4D-Var"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run the experiment described by a config file");
  std::string config;
  std::vector<std::string> overrides;
  std::string out_dir;
  run->add_option("config", config, "experiment config file")->required();
  run->add_option("--override", overrides, "section.key=value (repeatable)");
  run->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  std::optional<std::string> out;
  if (!out_dir.empty()) out = out_dir;
  return varest::run_command(config, overrides, out, std::cout, std::cerr);
}
