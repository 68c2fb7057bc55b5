#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>

#include "gplsim/cli.hpp"

namespace {

using gplsim::cli::RunConfig;

std::string dashed(std::string key) {
  for (char& c : key)
    if (c == '_') c = '-';
  return key;
}

struct Bindings {
  std::map<std::string, std::string> text;
  std::map<std::string, bool> flags;
  std::map<std::string, CLI::Option*> opts;
  std::string config_file;
};

void bind_all(CLI::App* sub, Bindings& b) {
  sub->add_option("--config", b.config_file, "JSON file of configuration keys");
  const auto def = RunConfig::defaults();
  for (auto it = def.begin(); it != def.end(); ++it) {
    const std::string& key = it.key();
    const std::string name = "--" + dashed(key);
    if (it.value().is_boolean()) {
      b.opts[key] = sub->add_flag(name + ",!--no-" + dashed(key), b.flags[key]);
    } else {
      const std::string help = it.value().is_array() ? "comma separated list" : std::string();
      b.opts[key] = sub->add_option(name, b.text[key], help);
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gplsim: profile estimation and block empirical likelihood for longitudinal single-index models"};
  app.require_subcommand(1);
  const std::map<std::string, std::string> commands{
      {"fit", "select K and fit by profile estimating equations"},
      {"infer", "confidence intervals for every method"},
      {"band", "bootstrap pointwise and simultaneous bands for the link"},
      {"simulate", "simulation study for one design cell"},
      {"cv", "subject-level cross-validated deviance"},
      {"stability", "interval length stability across working correlations"}};
  std::map<std::string, Bindings> bindings;
  for (const auto& [name, help] : commands) bind_all(app.add_subcommand(name, help), bindings[name]);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << gplsim::cli::error_json("ConfigError", e.what()).dump() << "\n";
    return gplsim::cli::kExitError;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  const Bindings& b = bindings[cmd];
  try {
    RunConfig cfg;
    if (!b.config_file.empty()) cfg.merge_file(b.config_file);
    nlohmann::json patch = nlohmann::json::object();
    for (const auto& [key, opt] : b.opts) {
      if (opt->count() == 0) continue;
      patch[key] = b.flags.count(key) ? nlohmann::json(b.flags.at(key)) : RunConfig::from_text(key, b.text.at(key));
    }
    cfg.merge(patch, "command line");
    if (cmd == "fit") return gplsim::cli::cmd_fit(cfg, std::cerr);
    if (cmd == "infer") return gplsim::cli::cmd_infer(cfg, std::cerr);
    if (cmd == "band") return gplsim::cli::cmd_band(cfg, std::cerr);
    if (cmd == "simulate") return gplsim::cli::cmd_simulate(cfg, std::cerr);
    if (cmd == "cv") return gplsim::cli::cmd_cv(cfg, std::cerr);
    return gplsim::cli::cmd_stability(cfg, std::cerr);
  } catch (const gplsim::Error& e) {
    std::cerr << gplsim::cli::error_json(e.kind(), e.what()).dump() << "\n";
    return gplsim::cli::kExitError;
  } catch (const std::exception& e) {
    std::cerr << gplsim::cli::error_json("IOError", e.what()).dump() << "\n";
    return gplsim::cli::kExitError;
  }
}
