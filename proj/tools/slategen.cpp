// SPDX-License-Identifier: Apache-2.0
// Command-line entry point. Exit codes: 0 ok, 1 config, 2 data, 3 numeric,
// 4 anything else; failures print one line `error=<kind> stage=<cmd> msg="..."`
// on stderr.
#include <omp.h>

#include <CLI11.hpp>
#include <iostream>
#include <string>

#include "slategen/gsbi.hpp"
#include "slategen/io.hpp"
#include "slategen/pipeline.hpp"

namespace sp = slategen::pipeline;

namespace {

int fail(const char* kind, const std::string& stage, const std::string& msg, int code) {
  std::string clean;
  for (char c : msg) clean += (c == '\n' || c == '\r') ? ' ' : (c == '"' ? '\'' : c);
  std::cerr << "error=" << kind << " stage=" << stage << " msg=\"" << clean << "\"\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical slate generation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, run_dir;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool force = false;
  app.add_option("--config", config_path, "Config file (section/key = value)");
  app.add_option("--set", overrides, "Override a config key, e.g. --set model.d_model=32");
  app.add_option("--seed", seed, "Seed override (non-zero)");
  app.add_option("--run-dir", run_dir, "Run directory")->required();
  app.add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--force", force, "Recompute stage outputs that already exist");

  sp::RunOptions opt;
  std::string kv = "on";
  struct Stage {
    const char* name;
    const char* help;
    void (*fn)(const sp::RunConfig&, const sp::RunOptions&);
  };
  const Stage stages[] = {
      {"gen-data", "Generate the synthetic world and logged sessions", sp::gen_data},
      {"train-crq", "Train the item tokenizer", sp::train_crq},
      {"tokenize", "Assign semantic IDs and tokenize sessions", sp::tokenize},
      {"pretrain", "Teacher-forced pretraining of the slate decoders", sp::pretrain},
      {"align", "Preference alignment of the pretrained decoder", sp::align},
      {"infer", "Generate slates for held-out users (jsonl on stdout)", sp::infer},
      {"eval", "Ranking metrics of every checkpoint", sp::evaluate},
      {"bench", "Decoding throughput and cost ledgers", sp::bench},
      {"all", "gen-data through eval", sp::run_all},
  };
  std::vector<CLI::App*> subs;
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s.name, s.help);
    if (std::string(s.name) == "infer") {
      sub->add_option("--checkpoint", opt.checkpoint, "Checkpoint stem under checkpoints/");
      sub->add_option("--mode", opt.mode, "gsbi or flat")->check(CLI::IsMember({"gsbi", "flat"}));
      sub->add_option("--slate-size", opt.slate_size, "Slots to generate (default: trained M)");
      sub->add_option("--beam", opt.beam, "Beam width (default: model.beam)");
      sub->add_option("--kv-cache", kv, "on or off")->check(CLI::IsMember({"on", "off"}));
    }
    if (std::string(s.name) == "eval") sub->add_option("--checkpoint", opt.checkpoint, "Evaluate one checkpoint stem");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("config", "cli", e.what(), 1);
  }

  std::size_t chosen = 0;
  while (!subs[chosen]->parsed()) ++chosen;
  const std::string stage = stages[chosen].name;
  opt.run_dir = run_dir;
  opt.workers = workers;
  opt.force = force;
  opt.kv_cache = kv == "on";
  omp_set_num_threads(static_cast<int>(workers));

  try {
    const auto cfg = sp::load_config(config_path, overrides, seed);
    if (stage != "all") {
      if (stage == "infer") {
        if (!slategen::file_exists(run_dir + "/config.resolved"))
          throw slategen::DataError("run directory '" + run_dir + "' has no config.resolved");
      }
      sp::open_run_dir(cfg, opt);
    }
    stages[chosen].fn(cfg, opt);
  } catch (const slategen::ConfigError& e) {
    return fail("config", stage, e.what(), 1);
  } catch (const slategen::DataError& e) {
    return fail("data", stage, e.what(), 2);
  } catch (const slategen::NumericError& e) {
    return fail("numeric", stage, e.what(), 3);
  } catch (const slategen::gsbi::GenerationError& e) {
    return fail("data", stage, e.what(), 2);
  } catch (const std::exception& e) {
    return fail("internal", stage, e.what(), 4);
  }
  return 0;
}
