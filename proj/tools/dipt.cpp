// dipt: command-line front end for the workspace pipeline.

#include <CLI11.hpp>

#include <cstdio>
#include <functional>
#include <iostream>
#include <map>

#include "dipt/error.hpp"
#include "dipt/workspace.hpp"

namespace ws = dipt::workspace;

int main(int argc, char** argv) {
  CLI::App app{"Domain-invariant prompt tuning and vision-language distillation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> workspace;
  bool force = false;
  bool quiet = false;

  using Command = std::function<void(const ws::ExperimentConfig&, const ws::Options&)>;
  const std::vector<std::pair<std::string, std::pair<std::string, Command>>> commands{
      {"gen-data", {"Render the synthetic multi-domain dataset", ws::gen_data}},
      {"pretrain-teacher", {"Contrastively pretrain the teacher and write the template bank", ws::pretrain_teacher}},
      {"sweep", {"Grid-search k and learning rate per domain on the validation domain", ws::sweep}},
      {"tune-prompts", {"Learn domain tokens and write per-domain class embedding stores", ws::tune_prompts}},
      {"aggregate", {"Average domain stores into one invariant store per rotation", ws::aggregate}},
      {"distill", {"Train one student per method and rotation", ws::distill_students}},
      {"evaluate", {"Score every method on each held-out domain", ws::evaluate}},
      {"report", {"Write CSV tables and charts from the evaluation results", ws::report}},
      {"run", {"Run every command in order", ws::run_all}},
  };

  std::map<CLI::App*, Command> handlers;
  for (const auto& [name, entry] : commands) {
    CLI::App* sub = app.add_subcommand(name, entry.first);
    sub->add_option("-c,--config", config_path, "JSON config file (defaults apply when omitted)");
    sub->add_option("--set", overrides, "Override a config value, e.g. --set stage1.k=3")->take_all();
    sub->add_option("--seed", seed, "Global seed");
    sub->add_option("-w,--workspace", workspace, "Workspace root (default: $DIPT_WORKSPACE)");
    sub->add_flag("--force", force, "Replace outputs whose recorded inputs no longer match");
    sub->add_flag("-q,--quiet", quiet, "Only print errors");
    handlers[sub] = entry.second;
  }

  CLI11_PARSE(app, argc, argv);

  try {
    std::optional<std::filesystem::path> wpath;
    if (workspace) wpath = *workspace;
    const auto cfg = ws::load_config(config_path, overrides, seed, wpath);
    ws::Options opt;
    opt.force = force;
    if (!quiet) opt.log = [](const std::string& msg) { std::cout << msg << std::endl; };
    for (CLI::App* sub : app.get_subcommands()) handlers.at(sub)(cfg, opt);
  } catch (const dipt::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const dipt::ProvenanceError& e) {
    std::cerr << "provenance error: " << e.what() << "\n";
    return 2;
  } catch (const dipt::LeakageError& e) {
    std::cerr << "leakage error: " << e.what() << "\n";
    return 2;
  } catch (const dipt::MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const dipt::CompatibilityError& e) {
    std::cerr << "compatibility error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
