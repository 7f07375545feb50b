// seqswap <command> --config <path> [--seed N] [--out DIR]

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "seqswap/seqswap.h"

namespace {

void print_line(const char* line, void*) {
  std::fprintf(stderr, "%s\n", line);
  std::fflush(stderr);
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> commands;
  for (size_t i = 0; const char* name = seqswap_command_name(i); ++i) commands.emplace_back(name);

  std::string command, config, out = "out";
  std::optional<std::uint64_t> seed;
  bool quiet = false, check_only = false;

  CLI::App app{"Attention-to-sequential replacement experiments"};
  app.set_version_flag("--version", std::string(seqswap_version()));
  app.add_option("command", command, "Command to run")->required()->check(CLI::IsMember(commands));
  app.add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Master seed, overriding the config");
  app.add_option("--out", out, "Output directory")->capture_default_str();
  app.add_flag("--quiet,-q", quiet, "Suppress progress lines");
  app.add_flag("--check", check_only, "Validate the config and exit");
  CLI11_PARSE(app, argc, argv);

  int status = SEQSWAP_OK;
  if (check_only) {
    status = seqswap_check_config(config.c_str());
  } else {
    const std::uint64_t seed_value = seed.value_or(0);
    status = seqswap_run(command.c_str(), config.c_str(), seed ? &seed_value : nullptr, out.c_str(),
                         quiet ? nullptr : print_line, nullptr);
  }
  if (status != SEQSWAP_OK) {
    std::fprintf(stderr, "seqswap %s: %s error: %s\n", command.c_str(), seqswap_status_name(status),
                 seqswap_last_error());
  }
  return status;
}
