#pragma once

// Command-line front end. run_cli is the whole program minus main(), so
// tests can drive it in-process.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "guie/byte_io.hpp"
#include "guie/checkpoint.hpp"
#include "guie/error.hpp"
#include "guie/features.hpp"
#include "guie/preprocess.hpp"
#include "guie/retrieval.hpp"
#include "guie/train.hpp"

namespace guie::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kDivergence = 3 };

/// Fixed six-decimal rendering used for every numeric output.
inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline std::string read_text(const std::string& path) { return read_file_bytes(path); }

inline Manifest load_manifest(const std::string& path) {
  const auto text = read_text(path);
  try {
    return parse_manifest(text);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), path + ": " + e.what());
  }
}

inline FeatureStore load_store(const std::string& path) {
  try {
    return read_feature_file(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline std::string manifest_path_for(const std::string& store_path) {
  std::filesystem::path p(store_path);
  p.replace_extension(".jsonl");
  if (p.string() == store_path) p += ".manifest.jsonl";
  return p.string();
}

inline std::string split_path(const std::string& prefix, std::string_view part) {
  return prefix + "." + std::string(part) + ".jsonl";
}

/// Raw little-endian float32 vector, one file per image: <dir>/<image_id>.f32
inline std::vector<float> load_raw_feature(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.empty() || bytes.size() % 4 != 0)
    throw FormatError(path + ": size " + std::to_string(bytes.size()) + " is not a positive multiple of 4");
  ByteReader in(bytes);
  std::vector<float> v(bytes.size() / 4);
  in.f32s(v, "raw feature");
  return v;
}

namespace detail {

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

inline int cmd_ingest(const std::string& manifest, const std::string& dir, const std::string& out_path, Streams io) {
  const auto m = load_manifest(manifest);
  if (m.empty()) throw DomainError(manifest + ": manifest has no entries");
  std::optional<FeatureStore> store;
  for (const auto& e : m.entries) {
    const auto path = (std::filesystem::path(dir) / (e.image_id + ".f32")).string();
    auto v = load_raw_feature(path);
    if (!store) store.emplace(static_cast<std::uint32_t>(v.size()));
    if (v.size() != store->dimension())
      throw FormatError(path + ": dimension mismatch (" + std::to_string(v.size()) + " vs " +
                        std::to_string(store->dimension()) + ")");
    store->add({e.image_id, e.class_id, e.width, e.height, e.category, std::move(v)});
  }
  write_file_bytes(out_path, write_feature_file(*store));
  io.out << "records," << store->size() << "\ndim," << store->dimension() << "\n";
  return kOk;
}

inline int cmd_split(const std::string& manifest, const SplitSpec& spec, const std::string& prefix, Streams io) {
  const auto s = make_splits(load_manifest(manifest), spec);
  write_file_bytes(split_path(prefix, "train"), to_jsonl(s.train));
  write_file_bytes(split_path(prefix, "val"), to_jsonl(s.val));
  write_file_bytes(split_path(prefix, "zeroshot"), to_jsonl(s.zeroshot_test));
  io.out << "train," << s.train.size() << "\nval," << s.val.size() << "\nzeroshot," << s.zeroshot_test.size() << "\n";
  return kOk;
}

struct SynthArgs {
  std::uint32_t classes = 0, per_class = 0, dim = 0;
  double separation = 0.0;
  std::uint64_t seed = 0;
  std::string out;
};

inline int cmd_synth(const SynthArgs& a, Streams io) {
  const auto s = gen_synthetic(a.classes, a.per_class, a.dim, a.separation, a.seed);
  const auto mpath = manifest_path_for(a.out);
  write_file_bytes(a.out, write_feature_file(s.store));
  write_file_bytes(mpath, to_jsonl(s.manifest));
  io.out << "store," << a.out << "\nmanifest," << mpath << "\nrecords," << s.store.size() << "\n";
  return kOk;
}

struct TrainArgs {
  std::string store, splits, out, log_file;
  TrainConfig cfg;
};

inline int cmd_train(const TrainArgs& a, Streams io) {
  a.cfg.validate();
  const auto store = load_store(a.store);
  Splits splits;
  splits.train = load_manifest(split_path(a.splits, "train"));
  splits.zeroshot_test = load_manifest(split_path(a.splits, "zeroshot"));
  if (std::filesystem::exists(split_path(a.splits, "val"))) splits.val = load_manifest(split_path(a.splits, "val"));

  std::unique_ptr<std::ofstream> file;
  if (!a.log_file.empty()) {
    file = std::make_unique<std::ofstream>(a.log_file, std::ios::trunc);
    if (!*file) throw FormatError("cannot write " + a.log_file);
  }
  std::ostream& log = file ? *file : io.out;
  FitObserver obs;
  obs.on_epoch = [&](const EpochLog& e) {
    log << "epoch," << e.epoch << "," << fixed6(e.lr) << "," << fixed6(e.mean_loss) << "\n";
  };
  obs.on_eval = [&](const EvalLog& e) { log << "eval," << e.epoch << "," << fixed6(e.map) << "\n"; };

  const auto result = fit(store, splits, a.cfg, obs);
  write_file_bytes(a.out, write_checkpoint(result.best));
  io.out << "best," << result.best.epoch << "," << fixed6(result.best.zeroshot_map5) << "\n";
  return kOk;
}

inline int cmd_embed(const std::string& ckpt, const std::string& store_path, const std::string& out, Streams io) {
  const auto c = read_checkpoint(read_file_bytes(ckpt));
  const auto emb = embed_store(load_store(store_path), c);
  write_file_bytes(out, write_feature_file(emb));
  io.out << "records," << emb.size() << "\ndim," << emb.dimension() << "\n";
  return kOk;
}

inline int cmd_eval(const std::string& path, std::size_t k, Streams io) {
  const auto store = load_store(path);
  std::vector<std::string> ids;
  std::vector<std::uint32_t> labels;
  Matrix<float> e(static_cast<Eigen::Index>(store.size()), store.dimension());
  Eigen::Index row = 0;
  for (const auto& r : store.records()) {
    if (r.class_id == kUnlabeled) continue;
    ids.push_back(r.image_id);
    labels.push_back(r.class_id);
    e.row(row++) = Eigen::Map<const RowVector<float>>(r.feature.data(), store.dimension());
  }
  e.conservativeResize(row, Eigen::NoChange);
  const double map = leave_one_out_map(build_index(std::move(ids), std::move(e), std::move(labels)), k);
  io.out << "map@" << k << "," << fixed6(map) << "\n";
  return kOk;
}

inline int cmd_tta_plan(const std::string& manifest, double keep_fraction, const std::string& out, Streams io) {
  const auto m = load_manifest(manifest);
  TtaPolicy policy;
  policy.keep_fraction = keep_fraction;
  policy.validate();
  std::string text;
  std::size_t n = 0;
  for (const auto& e : m.entries) {
    for (const auto& p : tta_variants(e.width, e.height, e.category, policy)) {
      text += to_json(p, e.image_id).dump();
      text += '\n';
      ++n;
    }
  }
  if (out.empty() || out == "-") {
    io.out << text;
  } else {
    write_file_bytes(out, text);
    io.out << "plans," << n << "\n";
  }
  return kOk;
}

}  // namespace detail

/// Parses `args` (without the program name) and runs one subcommand.
/// Exit codes: 0 ok, 1 usage, 2 data, 3 divergence.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  detail::Streams io{out, err};
  CLI::App app{"Projection-head training and retrieval toolkit", "guie"};
  app.require_subcommand(1);

  std::string manifest, features_dir, out_path, prefix, store_path, ckpt, emb_path;

  auto* ingest = app.add_subcommand("ingest", "Pack per-image raw float32 features into a GUIEFEAT store");
  ingest->add_option("--manifest", manifest, "JSONL manifest")->required();
  ingest->add_option("--features", features_dir, "Directory of <image_id>.f32 files")->required();
  ingest->add_option("--out", out_path, "Output store")->required();

  SplitSpec split_spec;
  auto* split = app.add_subcommand("split", "Class-disjoint zero-shot split plus per-class train/val");
  split->add_option("--manifest", manifest, "JSONL manifest")->required();
  split->add_option("--zeroshot-classes", split_spec.zeroshot_class_count, "Classes held out entirely")->required();
  split->add_option("--train-frac", split_spec.train_fraction, "Per-class train fraction")->capture_default_str();
  split->add_option("--seed", split_spec.seed, "Sampling seed")->capture_default_str();
  split->add_option("--out-prefix", prefix, "Writes <prefix>.{train,val,zeroshot}.jsonl")->required();

  detail::SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic Gaussian-cluster store and manifest");
  synth->add_option("--classes", synth_args.classes)->required()->check(CLI::PositiveNumber);
  synth->add_option("--per-class", synth_args.per_class)->required()->check(CLI::PositiveNumber);
  synth->add_option("--dim", synth_args.dim)->required()->check(CLI::PositiveNumber);
  synth->add_option("--separation", synth_args.separation)->required()->check(CLI::NonNegativeNumber);
  synth->add_option("--seed", synth_args.seed)->capture_default_str();
  synth->add_option("--out", synth_args.out, "Store path; manifest goes next to it with a .jsonl extension")
      ->required();

  detail::TrainArgs ta;
  auto& tc = ta.cfg;
  auto* train = app.add_subcommand("train", "Train the projection head");
  train->add_option("--store", ta.store, "Feature store")->required();
  train->add_option("--splits", ta.splits, "Split prefix from `split`")->required();
  train->add_option("--dim-out", tc.d_out)->capture_default_str();
  train->add_option("--scale", tc.arcface.scale)->capture_default_str();
  train->add_option("--margin", tc.arcface.margin)->capture_default_str();
  train->add_option("--batch", tc.batch_size)->capture_default_str();
  train->add_option("--epochs", tc.total_epochs)->capture_default_str();
  train->add_option("--lr-max", tc.schedule.lr_max)->capture_default_str();
  train->add_option("--lr-min", tc.schedule.lr_min)->capture_default_str();
  train->add_option("--warmup-epochs", tc.schedule.warmup_epochs)->capture_default_str();
  train->add_option("--weight-decay", tc.adamw.weight_decay)->capture_default_str();
  train->add_option("--rho", tc.sam.rho)->capture_default_str();
  train->add_option("--beta1", tc.adamw.beta1)->capture_default_str();
  train->add_option("--beta2", tc.adamw.beta2)->capture_default_str();
  train->add_option("--adam-eps", tc.adamw.epsilon)->capture_default_str();
  train->add_option("--eval-every", tc.eval_every)->capture_default_str();
  train->add_option("--seed", tc.seed)->capture_default_str();
  train->add_option("--log-file", ta.log_file, "CSV progress log (default: stdout)");
  train->add_option("--out", ta.out, "Checkpoint path")->required();

  auto* embed = app.add_subcommand("embed", "Embed a feature store with a trained head");
  embed->add_option("--checkpoint", ckpt)->required();
  embed->add_option("--store", store_path)->required();
  embed->add_option("--out", out_path)->required();

  std::size_t k = 5;
  auto* eval = app.add_subcommand("eval", "Leave-one-out mAP@k over an embedding store");
  eval->add_option("--embeddings", emb_path)->required();
  eval->add_option("--k", k)->capture_default_str()->check(CLI::PositiveNumber);

  double keep_fraction = 0.9;
  std::string plans_out;
  auto* tta = app.add_subcommand("tta-plan", "Emit test-time augmentation plans as JSONL");
  tta->add_option("--manifest", manifest)->required();
  tta->add_option("--keep-fraction", keep_fraction)->capture_default_str();
  tta->add_option("--out", plans_out, "Output JSONL (default: stdout)");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  const auto fail = [&](int code, const std::exception& e) {
    err << "guie " << app.get_subcommands().front()->get_name() << ": " << e.what() << "\n";
    return code;
  };
  try {
    if (ingest->parsed()) return detail::cmd_ingest(manifest, features_dir, out_path, io);
    if (split->parsed()) return detail::cmd_split(manifest, split_spec, prefix, io);
    if (synth->parsed()) return detail::cmd_synth(synth_args, io);
    if (train->parsed()) return detail::cmd_train(ta, io);
    if (embed->parsed()) return detail::cmd_embed(ckpt, store_path, out_path, io);
    if (eval->parsed()) return detail::cmd_eval(emb_path, k, io);
    if (tta->parsed()) return detail::cmd_tta_plan(manifest, keep_fraction, plans_out, io);
  } catch (const ConfigError& e) {
    return fail(kUsage, e);
  } catch (const DivergenceError& e) {
    return fail(kDivergence, e);
  } catch (const OptimizerError& e) {
    return fail(kDivergence, e);
  } catch (const std::exception& e) {
    return fail(kData, e);
  }
  return kUsage;
}

}  // namespace guie::cli
