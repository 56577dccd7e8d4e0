/* Copyright 2026 The ecglab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// ecglab prepare|train-single|train-multi|train-diffusion|generate|augment|eval|report
//   [--config run.json] [--seed N] [--jobs N] [--out DIR] [command options]

#include <CLI11.hpp>

#include "ecglab/cli.hpp"

namespace {

using ecglab::cli::json;
using ecglab::cli::set_key;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::string out;
  std::vector<std::string> signals, annotations;
  std::string class_name, checkpoint, manifest, task, resume, aami_map;
  std::optional<ecglab::Index> n, count, epochs, train_steps;
  bool aami = false;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ECG beat classification and minority-class augmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", f.seed, "Overrides the config seed");
  app.add_option("--jobs", f.jobs, "Worker threads for per-class augmentation and DTW")->check(CLI::PositiveNumber);
  app.add_option("--out", f.out, "Output directory (default: config output_dir)");

  auto* prepare = app.add_subcommand("prepare", "Resample, segment, split and shard raw records");
  prepare->add_option("--signal", f.signals, "Signal file (repeatable, paired with --annotations)");
  prepare->add_option("--annotations", f.annotations, "Annotation file (repeatable)");

  auto* single = app.add_subcommand("train-single", "Train the single-task classifier");
  auto* multi = app.add_subcommand("train-multi", "Train the two-task classifier");
  for (auto* s : {single, multi}) {
    s->add_option("--manifest", f.manifest, "Training manifest (task m for train-multi)");
    s->add_option("--epochs", f.epochs, "Overrides train.epochs");
    s->add_option("--resume", f.resume, "Continue from a last.ckpt");
  }

  auto* tdiff = app.add_subcommand("train-diffusion", "Train a diffusion model for one class");
  tdiff->add_option("--class", f.class_name, "Class to model");
  tdiff->add_option("--manifest", f.manifest, "Training manifest");
  tdiff->add_option("--steps", f.train_steps, "Overrides diffusion.train_steps");

  auto* gen = app.add_subcommand("generate", "Sample segments from a diffusion checkpoint");
  gen->add_option("--checkpoint", f.checkpoint, "Diffusion checkpoint (sidecar next to it)");
  gen->add_option("-n,--count", f.n, "Number of segments");

  auto* aug = app.add_subcommand("augment", "Per-class models, merged training set and quality reports");
  aug->add_option("--manifest", f.manifest, "Training manifest");
  aug->add_option("--count", f.count, "Synthetic segments per class");
  aug->add_option("--steps", f.train_steps, "Overrides diffusion.train_steps");

  auto* eval = app.add_subcommand("eval", "Classification report for a checkpoint on a manifest");
  eval->add_option("--checkpoint", f.checkpoint, "Classifier checkpoint");
  eval->add_option("--manifest", f.manifest, "Evaluation manifest");
  eval->add_option("--task", f.task, "m or p for two-task checkpoints");
  eval->add_flag("--aami", f.aami, "Add the regrouped six-class report");
  eval->add_option("--aami-map", f.aami_map, "JSON class -> group map");

  app.add_subcommand("report", "Parameter, FLOP and shape accounting of the configured models");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ecglab::cli::kExitOk : ecglab::cli::kExitInput;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  ecglab::cli::Context cx;
  try {
    json user = ecglab::cli::read_user_config(f.config);
    if (f.seed) user["seed"] = *f.seed;
    if (!f.out.empty()) user["output_dir"] = f.out;
    if (!f.signals.empty() || !f.annotations.empty()) {
      if (f.signals.size() != f.annotations.size())
        throw ecglab::ConfigError("--signal and --annotations must be given the same number of times");
      json recs = json::array();
      for (std::size_t i = 0; i < f.signals.size(); ++i)
        recs.push_back({{"signal", f.signals[i]}, {"annotations", f.annotations[i]}});
      set_key(user, "data.records", recs);
    }
    if (!f.manifest.empty()) set_key(user, command == "eval" ? "eval.manifest" : "data.train_manifest", f.manifest);
    if (f.epochs) set_key(user, "train.epochs", *f.epochs);
    if (!f.resume.empty()) set_key(user, "train.resume", f.resume);
    if (!f.class_name.empty()) set_key(user, "diffusion.class_name", f.class_name);
    if (f.train_steps) set_key(user, "diffusion.train_steps", *f.train_steps);
    if (f.n) set_key(user, "diffusion.n", *f.n);
    if (f.count) set_key(user, "diffusion.count", *f.count);
    if (!f.checkpoint.empty()) set_key(user, command == "eval" ? "eval.checkpoint" : "diffusion.checkpoint", f.checkpoint);
    if (!f.task.empty()) set_key(user, "eval.task", f.task);
    if (f.aami) set_key(user, "eval.aami", true);
    if (!f.aami_map.empty()) set_key(user, "eval.aami_map", f.aami_map);
    cx.config = ecglab::cli::parse_run_config(user);
  } catch (const ecglab::Error& e) {
    std::cerr << "ecglab " << command << ": " << e.what() << "\n";
    return ecglab::cli::kExitInput;
  }
  cx.out = cx.config.output_dir;
  cx.jobs = ecglab::cli::effective_jobs(f.jobs);
  cx.manifest.argv.assign(argv, argv + argc);
  return ecglab::cli::run_command(command, cx);
}
