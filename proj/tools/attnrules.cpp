// attnrules <command> --config <file> [--section.key value ...]

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "attnrules/pipeline.hpp"
#include "attnrules/server.hpp"

namespace {

void set_log_level() {
  const char* env = std::getenv("ATTNRULES_LOG");
  if (!env) return;
  const auto level = spdlog::level::from_str(env);
  if (level == spdlog::level::off && std::string(env) != "off") {
    spdlog::warn("ATTNRULES_LOG: unknown level '{}'", env);
    return;
  }
  spdlog::set_level(level);
}

}  // namespace

int main(int argc, char** argv) {
  set_log_level();
  CLI::App app{"Extract and evaluate attention-head rules over sparse autoencoder features"};
  app.require_subcommand(1);
  std::string config_path;
  bool resume = false;
  const char* commands[][2] = {
      {"synth", "build a planted model, SAEs and corpus"},
      {"train-sae", "train input and output SAEs on the corpus"},
      {"extract", "index activations, build exemplar datasets, rank rules"},
      {"eval", "score rules on the test split and write reports"},
      {"intervene", "prepend distractor tokens and record the feature's response"},
      {"serve", "serve the run directory over HTTP"},
      {"verify", "re-hash every artifact listed in the manifest"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "INI config file");
    sub->allow_extras();
    if (std::string(name) == "train-sae") sub->add_flag("--resume", resume, "continue from the latest checkpoint");
  }
  CLI11_PARSE(app, argc, argv);

  auto* sub = app.get_subcommands().front();
  const std::string cmd = sub->get_name();
  try {
    attnrules::RunConfig cfg = config_path.empty() ? attnrules::RunConfig() : attnrules::RunConfig::from_file(config_path);
    cfg.apply_overrides(sub->remaining());
    if (cmd == "synth") attnrules::cmd_synth(cfg);
    else if (cmd == "train-sae") attnrules::cmd_train_sae(cfg, resume);
    else if (cmd == "extract") attnrules::cmd_extract(cfg);
    else if (cmd == "eval") attnrules::cmd_eval(cfg);
    else if (cmd == "intervene") attnrules::cmd_intervene(cfg);
    else if (cmd == "serve") attnrules::cmd_serve(cfg);
    else if (cmd == "verify") attnrules::cmd_verify(cfg);
  } catch (const std::exception& e) {
    spdlog::error("{}: {}", cmd, e.what());
    return attnrules::exit_code(e);
  }
  return 0;
}
