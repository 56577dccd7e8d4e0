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

// Command layer behind the `ecglab` executable: run configuration, run
// manifests and one function per subcommand. Argument parsing lives in
// tools/ecglab.cpp. Needs OpenSSL (libcrypto) for content hashes.

#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecglab/augment.hpp"
#include "ecglab/metrics.hpp"
#include "ecglab/multitask.hpp"
#include "ecglab/training.hpp"

namespace ecglab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitInput = 2;    // config, data or usage problem
inline constexpr int kExitNumeric = 3;  // non-finite loss

// ---------------------------------------------------------------- hashing

/// Hex SHA-1 of `bytes` with git's blob header, i.e. `git hash-object`.
inline std::string git_blob_sha1(std::string_view bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw StateError("EVP_MD_CTX_new failed");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 && EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw StateError("SHA-1 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string read_file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataIntegrityError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::string file_sha1(const fs::path& p) { return git_blob_sha1(read_file_bytes(p)); }

// ---------------------------------------------------------------- configuration

/// Every accepted key with its default. "full" keeps the large-scale
/// training settings; "desk" shrinks batch, epochs and the diffusion model.
inline json default_config(const std::string& profile) {
  if (profile != "desk" && profile != "full")
    throw ConfigError("unknown profile '" + profile + "' (expected desk or full)");
  const bool full = profile == "full";
  DFNetConfig dfnet;
  CGCConfig cgc;
  GRUUNetConfig unet;
  if (!full) {
    unet.base_channels = 16;
    unet.gru_layers = 2;
  }
  DiffusionOptions dopt;
  dopt.steps = full ? 1000 : 100;
  return {
      {"profile", profile},
      {"seed", 0},
      {"output_dir", "runs/" + profile},
      {"data",
       {{"records", json::array()},
        {"classes", json::array()},
        {"segment_len", kSegmentLen},
        {"rate_hz", kTargetRateHz},
        {"split_ratio", 0.8},
        {"val_fraction", 0.1},
        {"train_manifest", ""},
        {"test_manifest", ""},
        {"train_manifest_p", ""},
        {"test_manifest_p", ""}}},
      {"model", {{"dfnet", dfnet}, {"multitask", cgc}, {"diffusion", unet}}},
      {"train",
       {{"lr", 1e-3},
        {"l2", 1e-5},
        {"batch_size", full ? 1000 : 32},
        {"epochs", full ? 300 : 50},
        {"factor", 0.5},
        {"patience", 25},
        {"resume", ""}}},
      {"diffusion",
       {{"steps", dopt.steps},
        {"beta_1", dopt.beta_1},
        {"beta_T", dopt.beta_T},
        {"batch_size", dopt.batch_size},
        {"lr", dopt.lr},
        {"train_steps", full ? 20000 : 2000},
        {"class_name", ""},
        {"classes", default_minority_classes()},
        {"count", 900},
        {"checkpoint", ""},
        {"n", 900}}},
      {"eval",
       {{"checkpoint", ""}, {"manifest", ""}, {"task", "m"}, {"aami", false}, {"aami_map", ""}, {"csv", true}}},
  };
}

/// Overlays `user` on `base`, rejecting keys that `base` does not have.
/// Objects merge recursively; any other value replaces the default.
inline void strict_merge(json& base, const json& user, const std::string& where = "") {
  if (!user.is_object()) throw ConfigError("config" + (where.empty() ? "" : " section '" + where + "'") + " must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    auto& slot = base[key];
    if (slot.is_object())
      strict_merge(slot, value, path);
    else
      slot = value;
  }
}

struct RecordPaths {
  std::string signal;
  std::string annotations;
};

struct DataSection {
  std::vector<RecordPaths> records;
  std::vector<std::string> classes;
  Index segment_len = kSegmentLen;
  double rate_hz = kTargetRateHz;
  double split_ratio = 0.8;
  double val_fraction = 0.1;
  std::string train_manifest, test_manifest, train_manifest_p, test_manifest_p;
};

struct TrainSection {
  double lr = 1e-3;
  double l2 = 1e-5;
  Index batch_size = 32;
  Index epochs = 50;
  double factor = 0.5;
  int patience = 25;
  std::string resume;

  TrainOptions options(std::uint64_t seed) const {
    TrainOptions o;
    o.batch_size = batch_size;
    o.lr = lr;
    o.l2 = l2;
    o.patience = patience;
    o.factor = factor;
    o.seed = seed;
    return o;
  }
};

struct DiffusionSection {
  DiffusionOptions options;
  Index train_steps = 2000;
  std::string class_name;
  std::vector<std::string> classes;
  Index count = 900;
  std::string checkpoint;
  Index n = 900;
};

struct EvalSection {
  std::string checkpoint, manifest;
  std::string task = "m";
  bool aami = false;
  std::string aami_map;
  bool csv = true;
};

struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = 0;
  std::string output_dir;
  DataSection data;
  DFNetConfig dfnet;
  CGCConfig multitask;
  GRUUNetConfig unet;
  TrainSection train;
  DiffusionSection diffusion;
  EvalSection eval;
  json snapshot;  // merged JSON the fields were read from

  std::string hash() const { return git_blob_sha1(snapshot.dump()); }
};

/// Parses a user config (possibly empty) over the defaults of its profile.
inline RunConfig parse_run_config(const json& user) {
  std::string profile = "desk";
  if (user.is_object() && user.contains("profile")) profile = user.at("profile").get<std::string>();
  json j = default_config(profile);
  strict_merge(j, user.is_null() ? json::object() : user);
  RunConfig c;
  try {
    c.profile = profile;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    const auto& d = j.at("data");
    for (const auto& r : d.at("records")) {
      json rec = {{"signal", ""}, {"annotations", ""}};
      strict_merge(rec, r, "data.records[]");
      c.data.records.push_back({rec.at("signal").get<std::string>(), rec.at("annotations").get<std::string>()});
    }
    c.data.classes = d.at("classes").get<std::vector<std::string>>();
    c.data.segment_len = d.at("segment_len").get<Index>();
    c.data.rate_hz = d.at("rate_hz").get<double>();
    c.data.split_ratio = d.at("split_ratio").get<double>();
    c.data.val_fraction = d.at("val_fraction").get<double>();
    c.data.train_manifest = d.at("train_manifest").get<std::string>();
    c.data.test_manifest = d.at("test_manifest").get<std::string>();
    c.data.train_manifest_p = d.at("train_manifest_p").get<std::string>();
    c.data.test_manifest_p = d.at("test_manifest_p").get<std::string>();
    const auto& m = j.at("model");
    c.dfnet = m.at("dfnet").get<DFNetConfig>();
    c.multitask = m.at("multitask").get<CGCConfig>();
    c.unet = m.at("diffusion").get<GRUUNetConfig>();
    const auto& t = j.at("train");
    c.train.lr = t.at("lr").get<double>();
    c.train.l2 = t.at("l2").get<double>();
    c.train.batch_size = t.at("batch_size").get<Index>();
    c.train.epochs = t.at("epochs").get<Index>();
    c.train.factor = t.at("factor").get<double>();
    c.train.patience = t.at("patience").get<int>();
    c.train.resume = t.at("resume").get<std::string>();
    const auto& df = j.at("diffusion");
    c.diffusion.options.steps = df.at("steps").get<Index>();
    c.diffusion.options.beta_1 = df.at("beta_1").get<double>();
    c.diffusion.options.beta_T = df.at("beta_T").get<double>();
    c.diffusion.options.batch_size = df.at("batch_size").get<Index>();
    c.diffusion.options.lr = df.at("lr").get<double>();
    c.diffusion.train_steps = df.at("train_steps").get<Index>();
    c.diffusion.class_name = df.at("class_name").get<std::string>();
    c.diffusion.classes = df.at("classes").get<std::vector<std::string>>();
    c.diffusion.count = df.at("count").get<Index>();
    c.diffusion.checkpoint = df.at("checkpoint").get<std::string>();
    c.diffusion.n = df.at("n").get<Index>();
    const auto& e = j.at("eval");
    c.eval.checkpoint = e.at("checkpoint").get<std::string>();
    c.eval.manifest = e.at("manifest").get<std::string>();
    c.eval.task = e.at("task").get<std::string>();
    c.eval.aami = e.at("aami").get<bool>();
    c.eval.aami_map = e.at("aami_map").get<std::string>();
    c.eval.csv = e.at("csv").get<bool>();
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("config value has the wrong type: ") + ex.what());
  }
  if (c.train.epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (c.train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(c.data.val_fraction >= 0 && c.data.val_fraction < 1)) throw ConfigError("data.val_fraction must lie in [0, 1)");
  if (c.eval.task != "m" && c.eval.task != "p") throw ConfigError("eval.task must be \"m\" or \"p\"");
  if (c.diffusion.train_steps < 0 || c.diffusion.count < 0 || c.diffusion.n < 0)
    throw ConfigError("diffusion step and sample counts must be >= 0");
  c.diffusion.options.seed = c.seed;
  c.snapshot = std::move(j);
  return c;
}

/// The user JSON at `path`, or an empty object when no path is given.
inline json read_user_config(const fs::path& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

/// Sets a dotted key such as "diffusion.class_name" in a user config, so
/// command-line overrides end up in the config snapshot.
inline void set_key(json& user, const std::string& dotted, json value) {
  json* node = &user;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

// ---------------------------------------------------------------- run manifest

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  json config;
  std::string config_hash;
  std::map<std::string, std::string> inputs;  // path -> git blob SHA-1
  std::vector<std::string> checkpoints;
  std::vector<std::string> reports;
  std::vector<std::string> outputs;
  std::string status = "running";
  std::string message;
  int exit_code = 0;
  double wall_seconds = 0;
  int jobs = 1;

  void add_input(const fs::path& p) { inputs[p.string()] = file_sha1(p); }

  /// Hashes a manifest and every shard it lists.
  void add_dataset(const fs::path& manifest_path) {
    fs::path mp = manifest_path;
    if (fs::is_directory(mp)) mp /= kManifestFile;
    add_input(mp);
    for (const auto& s : read_manifest(mp).shards) add_input(mp.parent_path() / s.path);
  }
};

inline json to_json(const RunManifest& m) {
  std::string line;
  for (const auto& a : m.argv) line += (line.empty() ? "" : " ") + a;
  return {{"command", m.command},   {"argv", m.argv},         {"command_line", line},
          {"config", m.config},     {"config_hash", m.config_hash}, {"inputs", m.inputs},
          {"checkpoints", m.checkpoints}, {"reports", m.reports},   {"outputs", m.outputs},
          {"status", m.status},     {"message", m.message},   {"exit_code", m.exit_code},
          {"wall_seconds", m.wall_seconds}, {"jobs", m.jobs}};
}

/// Temp file plus rename, so a reader sees the old manifest or the new one.
inline void write_json_atomic(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw DataIntegrityError("cannot write '" + tmp.string() + "'");
    os << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------- helpers

/// `requested`, capped by ECGLAB_THREADS when that is set to a positive integer.
inline int effective_jobs(int requested) {
  int jobs = std::max(1, requested);
  if (const char* env = std::getenv("ECGLAB_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && cap > 0) jobs = std::min<long>(jobs, cap);
    else warn("ignoring ECGLAB_THREADS='" + std::string(env) + "'");
  }
  return jobs;
}

struct Context {
  RunConfig config;
  fs::path out;
  int jobs = 1;
  std::ostream* log = &std::cout;
  RunManifest manifest;
};

inline std::ostream& say(Context& cx) { return *cx.log; }

inline fs::path require_path(const std::string& p, const std::string& key) {
  if (p.empty()) throw ConfigError("config key '" + key + "' is required for this command");
  return p;
}

/// Reads shards and applies per-segment z-scoring, which is a load-time step.
inline SegmentSet load_dataset(Context& cx, const std::string& path, const std::string& key) {
  const auto p = require_path(path, key);
  if (!fs::exists(p)) throw DataIntegrityError("dataset '" + p.string() + "' (" + key + ") does not exist");
  cx.manifest.add_dataset(p);
  return normalized(read_shards(p));
}

inline std::string format_counts(const SegmentSet& s) {
  std::string out;
  const auto counts = s.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c)
    out += (c ? ", " : "") + s.class_names[c] + "=" + std::to_string(counts[c]);
  return out;
}

inline void write_checkpoint_logged(Context& cx, const fs::path& p, const Checkpoint& ck) {
  write_checkpoint(p, ck);
  const auto s = p.string();
  if (std::find(cx.manifest.checkpoints.begin(), cx.manifest.checkpoints.end(), s) == cx.manifest.checkpoints.end())
    cx.manifest.checkpoints.push_back(s);
}

inline void write_report(Context& cx, const fs::path& p, const json& j) {
  write_json_atomic(p, j);
  cx.manifest.reports.push_back(p.string());
}

// ---------------------------------------------------------------- prepare

/// Reads every record, resamples, cuts labelled windows and writes raw
/// train/test shards under <out>/train and <out>/test.
inline void cmd_prepare(Context& cx) {
  const auto& d = cx.config.data;
  if (d.records.empty()) throw ConfigError("prepare needs at least one record (data.records or --signal/--annotations)");
  std::vector<std::pair<RawRecord, AnnotationList>> loaded;
  for (const auto& r : d.records) {
    for (const auto& p : {r.signal, r.annotations})
      if (!fs::exists(p)) throw DataIntegrityError("input file '" + p + "' does not exist");
    cx.manifest.add_input(r.signal);
    cx.manifest.add_input(r.annotations);
    const auto rec = read_signal_file(r.signal);
    auto at_rate = resample(rec, d.rate_hz);
    auto ann = resample_annotations(read_annotation_file(r.annotations), static_cast<Index>(rec.samples.size()),
                                    static_cast<Index>(at_rate.samples.size()));
    loaded.emplace_back(std::move(at_rate), std::move(ann));
  }
  // One class table for all records: the configured one, else first appearance.
  std::vector<std::string> classes = d.classes;
  if (classes.empty())
    for (const auto& [rec, ann] : loaded)
      for (const auto& a : ann)
        if (std::find(classes.begin(), classes.end(), a.label) == classes.end()) classes.push_back(a.label);

  std::vector<SegmentSet> parts;
  SegmentReport total;
  for (const auto& [rec, ann] : loaded) {
    SegmentReport rep;
    parts.push_back(segment_events(rec, ann, d.segment_len, &classes, &rep));
    total.emitted += rep.emitted;
    total.skipped_edge += rep.skipped_edge;
    total.skipped_unknown += rep.skipped_unknown;
  }
  std::vector<const SegmentSet*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  SegmentSet all = concat_sets(ptrs);
  all.class_names = classes;
  auto [train, test] = split_train_test(all, d.split_ratio, derive_seed(cx.config.seed, {0x5b1ULL}));
  write_shards(train, cx.out / "train", "train");
  write_shards(test, cx.out / "test", "test");
  cx.manifest.outputs.push_back((cx.out / "train" / kManifestFile).string());
  cx.manifest.outputs.push_back((cx.out / "test" / kManifestFile).string());
  say(cx) << "segments: " << total.emitted << " (skipped " << total.skipped_edge << " at edges, "
          << total.skipped_unknown << " with unknown labels)\n"
          << "classes: " << all.num_classes() << "\n"
          << "all:   " << format_counts(all) << "\n"
          << "train: " << format_counts(train) << "\n"
          << "test:  " << format_counts(test) << "\n";
}

// ---------------------------------------------------------------- classifier training

inline double meta_best(const Checkpoint& ck) {
  return ck.meta.contains("best_val") ? ck.meta.at("best_val").get<double>() : std::numeric_limits<double>::infinity();
}

/// DFNet with Adam and the plateau scheduler on validation CE. Writes
/// last.ckpt every epoch and best.ckpt on improvement. A non-finite loss
/// propagates as NumericError with best.ckpt left as it was.
inline void cmd_train_single(Context& cx) {
  const auto& c = cx.config;
  const auto all = load_dataset(cx, c.data.train_manifest, "data.train_manifest");
  auto [train, val] = carve_validation(all, c.data.val_fraction, c.seed);
  DFNetConfig mc = c.dfnet;
  mc.cls_num = all.num_classes();
  mc.input_len = all.segment_len;
  DFNet<float> model(mc, derive_seed(c.seed, {0xdf1ULL}));
  SingleTaskTrainer<float> trainer(model, c.train.options(c.seed));
  double best = std::numeric_limits<double>::infinity();
  if (!c.train.resume.empty()) {
    const auto ck = read_checkpoint(c.train.resume);
    if (ck.meta.value("kind", "") != "dfnet") throw DataIntegrityError("'" + c.train.resume + "' is not a DFNet checkpoint");
    cx.manifest.add_input(c.train.resume);
    trainer.restore(ck);
    best = meta_best(ck);
  }
  say(cx) << "train " << train.size() << " / val " << val.size() << " segments, " << mc.cls_num << " classes, "
          << count_params(model) << " parameters\n";
  HistoryWriter history(cx.out / "history.jsonl", !c.train.resume.empty());
  cx.manifest.outputs.push_back((cx.out / "history.jsonl").string());
  while (trainer.epoch() < c.train.epochs) {
    const auto st = trainer.run_epoch(train, val);
    history.write(to_json(st));
    auto ck = trainer.checkpoint();
    ck.meta["classes"] = all.class_names;
    if (st.val_ce < best) {
      best = st.val_ce;
      ck.meta["best_val"] = best;
      write_checkpoint_logged(cx, cx.out / "best.ckpt", ck);
    }
    ck.meta["best_val"] = best;
    write_checkpoint_logged(cx, cx.out / "last.ckpt", ck);
    say(cx) << "epoch " << st.epoch << " loss " << st.train_loss << " train_acc " << st.train_acc << " val_ce "
            << st.val_ce << " val_acc " << st.val_acc << " lr " << st.lr << "\n";
  }
}

/// Multi-task DFNet on the two training manifests with the dual-batch step
/// schedule. History rows carry ce_m and ce_p for every epoch.
inline void cmd_train_multi(Context& cx) {
  const auto& c = cx.config;
  const auto all_m = load_dataset(cx, c.data.train_manifest, "data.train_manifest");
  const auto all_p = load_dataset(cx, c.data.train_manifest_p, "data.train_manifest_p");
  auto [train_m, val_m] = carve_validation(all_m, c.data.val_fraction, derive_seed(c.seed, {1}));
  auto [train_p, val_p] = carve_validation(all_p, c.data.val_fraction, derive_seed(c.seed, {2}));
  CGCConfig mc = c.multitask;
  mc.classes_m = all_m.num_classes();
  mc.classes_p = all_p.num_classes();
  mc.backbone.input_len = all_m.segment_len;
  MultiTaskDFNet<float> model(mc, derive_seed(c.seed, {0xc6cULL}));
  MultiTaskTrainer<float> trainer(model, c.train.options(c.seed), train_m, train_p, &val_m, &val_p);
  double best = std::numeric_limits<double>::infinity();
  if (!c.train.resume.empty()) {
    const auto ck = read_checkpoint(c.train.resume);
    cx.manifest.add_input(c.train.resume);
    trainer.restore(ck);
    best = meta_best(ck);
  }
  say(cx) << "task m: " << train_m.size() << " train / " << val_m.size() << " val, task p: " << train_p.size()
          << " train / " << val_p.size() << " val, " << trainer.steps_per_epoch() << " steps per epoch, "
          << count_params(model) << " parameters\n";
  HistoryWriter history(cx.out / "history.jsonl", !c.train.resume.empty());
  cx.manifest.outputs.push_back((cx.out / "history.jsonl").string());
  trainer.set_history(&history);
  trainer.set_epoch_callback([&](const MultiTaskEpochStats& st) {
    auto ck = trainer.checkpoint();
    ck.meta["classes_m"] = all_m.class_names;
    ck.meta["classes_p"] = all_p.class_names;
    if (st.val_loss < best) {
      best = st.val_loss;
      ck.meta["best_val"] = best;
      write_checkpoint_logged(cx, cx.out / "best.ckpt", ck);
    }
    ck.meta["best_val"] = best;
    write_checkpoint_logged(cx, cx.out / "last.ckpt", ck);
    say(cx) << "epoch " << st.epoch << " loss " << st.loss << " ce_m " << st.ce_m << " ce_p " << st.ce_p << " acc_m "
            << st.acc_m << " acc_p " << st.acc_p << " val " << st.val_loss << "\n";
  });
  while (trainer.epoch() < c.train.epochs) trainer.run_epoch();
}

// ---------------------------------------------------------------- diffusion

inline AugmentConfig augment_config(const Context& cx, const fs::path& ckpt_dir) {
  AugmentConfig a;
  a.unet = cx.config.unet;
  a.diffusion = cx.config.diffusion.options;
  a.train_steps = cx.config.diffusion.train_steps;
  a.checkpoint_dir = ckpt_dir;
  a.seed = cx.config.seed;
  return a;
}

/// Trains one class model; writes the checkpoint, its sidecar and the loss curve.
inline void cmd_train_diffusion(Context& cx) {
  const auto& c = cx.config;
  if (c.diffusion.class_name.empty()) throw ConfigError("train-diffusion needs a class (--class or diffusion.class_name)");
  const auto train = load_dataset(cx, c.data.train_manifest, "data.train_manifest");
  if (!train.class_index(c.diffusion.class_name))
    throw ConfigError("class '" + c.diffusion.class_name + "' is not in the training manifest");
  const auto r = augment_class_workflow(train, c.diffusion.class_name, 0, augment_config(cx, cx.out));
  cx.manifest.checkpoints.push_back(r.checkpoint.string());
  cx.manifest.outputs.push_back(sidecar_path(r.checkpoint).string());
  {
    HistoryWriter h(cx.out / ("loss_" + c.diffusion.class_name + ".jsonl"));
    for (std::size_t i = 0; i < r.losses.size(); ++i) h.write({{"step", i}, {"loss", r.losses[i]}});
  }
  cx.manifest.outputs.push_back((cx.out / ("loss_" + c.diffusion.class_name + ".jsonl")).string());
  if (!r.losses.empty())
    say(cx) << "class " << c.diffusion.class_name << ": " << r.losses.size() << " steps, loss " << r.losses.front()
            << " -> " << r.losses.back() << "\n";
  say(cx) << "checkpoint " << r.checkpoint.string() << "\n";
}

/// Samples `n` segments from a saved class model into synthetic shards.
inline void cmd_generate(Context& cx) {
  const auto& c = cx.config;
  const auto ckpt_path = require_path(c.diffusion.checkpoint, "diffusion.checkpoint");
  const auto sc = read_sidecar(ckpt_path);
  const auto ck = read_checkpoint(ckpt_path);
  if (ck.meta.value("kind", "") != "diffusion") throw DataIntegrityError("'" + ckpt_path.string() + "' is not a diffusion checkpoint");
  cx.manifest.add_input(ckpt_path);
  cx.manifest.add_input(sidecar_path(ckpt_path));
  GRUUNetConfig ucfg = ck.meta.at("config").get<GRUUNetConfig>();
  GRUUNet<float> model(ucfg);
  auto ps = model.params();
  import_params(ck, ps);
  const auto sched = make_schedule(sc.steps, sc.beta_1, sc.beta_T);
  const auto samples = p_sample_loop(model, sched, c.diffusion.n, c.seed);
  const auto set = samples_to_set(samples, {sc.class_name}, 0, kTargetRateHz);
  const auto dir = cx.out / ("synthetic_" + sc.class_name);
  write_shards(set, dir, "synthetic_" + sc.class_name, true);
  cx.manifest.outputs.push_back((dir / kManifestFile).string());
  say(cx) << "wrote " << set.size() << " synthetic '" << sc.class_name << "' segments to " << dir.string() << "\n";
}

/// Per-class models for the configured minority classes, merged training
/// shards and one quality report per class.
inline void cmd_augment(Context& cx) {
  const auto& c = cx.config;
  const auto raw = [&] {
    const auto p = require_path(c.data.train_manifest, "data.train_manifest");
    if (!fs::exists(p)) throw DataIntegrityError("dataset '" + p.string() + "' does not exist");
    cx.manifest.add_dataset(p);
    return read_shards(p);
  }();
  const auto train = normalized(raw);
  const auto results = augment_classes(train, c.diffusion.classes, c.diffusion.count,
                                       augment_config(cx, cx.out / "checkpoints"), cx.jobs);
  SegmentSet merged = raw;
  json summary = json::array();
  for (const auto& r : results) {
    merged = augment_merge(merged, r.synthetic, r.class_name, r.synthetic.size());
    cx.manifest.checkpoints.push_back(r.checkpoint.string());
    json entry = {{"class", r.class_name}, {"synthetic", r.synthetic.size()}, {"checkpoint", r.checkpoint.string()}};
    if (!r.losses.empty()) entry["loss"] = {{"first", r.losses.front()}, {"last", r.losses.back()}};
    if (r.quality) {
      const auto path = cx.out / "reports" / ("quality_" + r.class_name + ".json");
      auto rep = to_json(*r.quality);
      rep["class"] = r.class_name;
      rep["config_hash"] = c.hash();
      write_report(cx, path, rep);
      entry["quality"] = rep;
      say(cx) << r.class_name << ": FID " << r.quality->fid << " DTW " << r.quality->mu_dtw << " +- "
              << r.quality->sigma_dtw << " KL " << r.quality->kl << "\n";
    }
    summary.push_back(entry);
  }
  write_shards(merged, cx.out / "augmented", "augmented");
  cx.manifest.outputs.push_back((cx.out / "augmented" / kManifestFile).string());
  write_report(cx, cx.out / "reports" / "augment_summary.json",
               {{"classes", summary}, {"seed", c.seed}, {"config_hash", c.hash()}, {"train_counts", format_counts(merged)}});
  say(cx) << "augmented: " << format_counts(merged) << "\n";
}

// ---------------------------------------------------------------- eval

inline json report_block(const ClassificationReport& r) { return to_json(r); }

/// Inference with a DFNet or multi-task checkpoint on one manifest; writes
/// eval_report.json (and CSV tables). With `aami`, adds the regrouped report.
inline void cmd_eval(Context& cx) {
  const auto& c = cx.config;
  const auto ckpt_path = require_path(c.eval.checkpoint, "eval.checkpoint");
  const auto data = load_dataset(cx, c.eval.manifest, "eval.manifest");
  const auto ck = read_checkpoint(ckpt_path);
  cx.manifest.add_input(ckpt_path);
  const std::string kind = ck.meta.value("kind", "");

  std::vector<std::string> ck_classes;
  std::function<Tensor<float>(const Tensor<float>&)> forward;
  std::unique_ptr<DFNet<float>> single;
  std::unique_ptr<MultiTaskDFNet<float>> multi;
  Index k = 0;
  if (kind == "dfnet") {
    single = std::make_unique<DFNet<float>>(ck.meta.at("config").get<DFNetConfig>());
    auto ps = single->params();
    import_params(ck, ps);
    k = single->config.cls_num;
    ck_classes = ck.meta.value("classes", std::vector<std::string>{});
    forward = [&](const Tensor<float>& x) { return single->forward(x, Mode::Eval); };
  } else if (kind == "multitask") {
    multi = std::make_unique<MultiTaskDFNet<float>>(ck.meta.at("config").get<CGCConfig>());
    auto ps = multi->params();
    import_params(ck, ps);
    const int task = c.eval.task == "m" ? kTaskM : kTaskP;
    k = task == kTaskM ? multi->config.classes_m : multi->config.classes_p;
    ck_classes = ck.meta.value(task == kTaskM ? "classes_m" : "classes_p", std::vector<std::string>{});
    forward = [&, task](const Tensor<float>& x) { return multi->forward_task(x, task, Mode::Eval); };
  } else {
    throw DataIntegrityError("'" + ckpt_path.string() + "' is not a classifier checkpoint (kind '" + kind + "')");
  }
  if (k != data.num_classes())
    throw ConfigError("checkpoint has " + std::to_string(k) + " classes but the manifest has " +
                      std::to_string(data.num_classes()));
  if (!ck_classes.empty() && ck_classes != data.class_names)
    throw ConfigError("checkpoint class table differs from the manifest's");

  const auto ev = evaluate_classifier<float>(forward, data);
  const auto report = classification_report(data.labels, ev.predictions, k, data.class_names);
  json out = {{"checkpoint", ckpt_path.string()},
              {"manifest", c.eval.manifest},
              {"seed", c.seed},
              {"config_hash", c.hash()},
              {"ce", ev.ce},
              {"report", report_block(report)}};
  if (c.eval.csv) {
    std::ofstream(cx.out / "eval_report.csv") << to_csv(report);
    cx.manifest.outputs.push_back((cx.out / "eval_report.csv").string());
  }
  say(cx) << "accuracy " << report.overall_accuracy << ", macro F1 " << report.macro.f1 << "\n";
  if (c.eval.aami) {
    const AAMIMap map = c.eval.aami_map.empty() ? default_aami_map() : read_aami_map(c.eval.aami_map, data.class_names);
    map.validate(data.class_names);
    const auto truth = aami_regroup(data.labels, data.class_names, map);
    const auto pred = aami_regroup(ev.predictions, data.class_names, map);
    const auto grouped = classification_report(truth, pred, static_cast<Index>(map.groups.size()), map.groups);
    out["aami"] = report_block(grouped);
    if (c.eval.csv) {
      std::ofstream(cx.out / "eval_report_aami.csv") << to_csv(grouped);
      cx.manifest.outputs.push_back((cx.out / "eval_report_aami.csv").string());
    }
    say(cx) << "AAMI accuracy " << grouped.overall_accuracy << ", macro F1 " << grouped.macro.f1 << "\n";
  }
  write_report(cx, cx.out / "eval_report.json", out);
}

// ---------------------------------------------------------------- report

/// Parameter counts, FLOPs and traced shapes of the configured models.
inline void cmd_report(Context& cx) {
  const auto& c = cx.config;
  DFNet<float> single(c.dfnet);
  MultiTaskDFNet<float> multi(c.multitask);
  GRUUNet<float> unet(c.unet);
  auto shapes = [](const std::vector<ShapeRecord>& rec) {
    json a = json::array();
    for (const auto& r : rec) a.push_back({{"name", r.name}, {"shape", r.shape}});
    return a;
  };
  // One (1, 1, L) segment through a single task's experts, gate and tower.
  auto task_gflops = [&](int task) {
    NoGradGuard no_grad;
    MacCounterScope counter;
    multi.forward_task(Tensor<float>::zeros({1, 1, c.multitask.backbone.input_len}), task, Mode::Eval);
    return 2.0 * static_cast<double>(counter.macs()) / 1e9;
  };
  const json out = {
      {"dfnet",
       {{"config", c.dfnet},
        {"params", count_params(single)},
        {"gflops", estimate_flops(single, c.dfnet.input_len)},
        {"shapes", shapes(trace_shapes(single, c.dfnet.input_len))}}},
      {"multitask",
       {{"config", c.multitask},
        {"params", count_params(multi)},
        {"gflops_m", task_gflops(kTaskM)},
        {"gflops_p", task_gflops(kTaskP)}}},
      {"diffusion",
       {{"config", c.unet}, {"params", count_params(unet)}, {"shapes", shapes(trace_unet_shapes(unet, c.unet.input_len))}}},
      {"seed", c.seed},
      {"config_hash", c.hash()}};
  write_report(cx, cx.out / "model_report.json", out);
  std::ofstream csv(cx.out / "model_report.csv");
  csv << "model,params,gflops\n"
      << "dfnet," << out["dfnet"]["params"] << ',' << out["dfnet"]["gflops"] << '\n'
      << "multitask_m," << out["multitask"]["params"] << ',' << out["multitask"]["gflops_m"] << '\n'
      << "multitask_p," << out["multitask"]["params"] << ',' << out["multitask"]["gflops_p"] << '\n'
      << "diffusion," << out["diffusion"]["params"] << ",\n";
  cx.manifest.outputs.push_back((cx.out / "model_report.csv").string());
  say(cx) << "dfnet " << out["dfnet"]["params"] << " params, multitask " << out["multitask"]["params"]
          << " params, diffusion " << out["diffusion"]["params"] << " params\n";
}

// ---------------------------------------------------------------- dispatch

using Command = void (*)(Context&);

inline const std::map<std::string, Command>& commands() {
  static const std::map<std::string, Command> table{
      {"prepare", cmd_prepare},   {"train-single", cmd_train_single}, {"train-multi", cmd_train_multi},
      {"train-diffusion", cmd_train_diffusion}, {"generate", cmd_generate}, {"augment", cmd_augment},
      {"eval", cmd_eval},         {"report", cmd_report}};
  return table;
}

/// Runs one command, maps failures to exit codes and always writes
/// <out>/run_<command>.json once the output directory is known.
inline int run_command(const std::string& name, Context& cx, std::ostream& err = std::cerr) {
  const auto t0 = std::chrono::steady_clock::now();
  cx.manifest.command = name;
  cx.manifest.jobs = cx.jobs;
  cx.manifest.config = cx.config.snapshot;
  cx.manifest.config_hash = cx.config.hash();
  int code = kExitOk;
  try {
    const auto it = commands().find(name);
    if (it == commands().end()) throw ConfigError("unknown command '" + name + "'");
    fs::create_directories(cx.out);
    it->second(cx);
    cx.manifest.status = "ok";
  } catch (const NumericError& e) {
    code = kExitNumeric;
    cx.manifest.status = "numeric_failure";
    cx.manifest.message = e.what();
  } catch (const ConfigError& e) {
    code = kExitInput;
    cx.manifest.status = "input_error";
    cx.manifest.message = e.what();
  } catch (const ShapeError& e) {
    code = kExitInput;
    cx.manifest.status = "input_error";
    cx.manifest.message = e.what();
  } catch (const DataIntegrityError& e) {
    code = kExitInput;
    cx.manifest.status = "input_error";
    cx.manifest.message = e.what();
  } catch (const std::exception& e) {
    code = kExitInternal;
    cx.manifest.status = "internal_error";
    cx.manifest.message = e.what();
  }
  if (code != kExitOk) err << "ecglab " << name << ": " << cx.manifest.message << "\n";
  cx.manifest.exit_code = code;
  cx.manifest.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  try {
    if (fs::is_directory(cx.out)) write_json_atomic(cx.out / ("run_" + name + ".json"), to_json(cx.manifest));
  } catch (const std::exception& e) {
    err << "ecglab: could not write run manifest: " << e.what() << "\n";
    if (code == kExitOk) code = kExitInput;
  }
  return code;
}

}  // namespace ecglab::cli
