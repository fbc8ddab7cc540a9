#pragma once

// Command-line entry point: gen-data, train, eval, localize, gradcheck, ablate.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown flag,
// missing file, bad value).

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xmodal/ablation.hpp"
#include "xmodal/gradcheck.hpp"
#include "xmodal/metrics.hpp"
#include "xmodal/trainer.hpp"

namespace xmodal {

namespace detail {

/// Bad arguments detected after parsing; reported with exit code 2.
struct UsageError : Error {
  using Error::Error;
};

/// Calls fn with a float or double tag according to `precision`.
template <typename F>
decltype(auto) with_precision(int precision, F&& fn) {
  if (precision == 64) return fn(double{});
  return fn(float{});
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os || !(os << text)) throw IoError("cannot write " + path.string());
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

template <typename T>
void load_model(Model<T>& model, const Checkpoint& ck) {
  load_into(model.params(), ck);
}

/// Registers --<key> for every config key; values land in `overrides`.
inline void add_config_flags(CLI::App* cmd, std::map<std::string, std::string>& overrides) {
  for (const auto& [key, value] : config_entries(TrainConfig{})) {
    if (key == "seed") continue;
    cmd->add_option_function<std::string>(
           "--" + key, [&overrides, k = key](const std::string& v) { overrides[k] = v; },
           "config key (default " + value + ")")
        ->group("Config keys");
  }
}

inline TrainConfig resolve_config(const std::string& path, const std::map<std::string, std::string>& overrides,
                                  const std::uint64_t* seed) {
  try {
    TrainConfig cfg = path.empty() ? TrainConfig{} : load_train_config(path);
    for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
  } catch (const ValidationError& e) {
    throw UsageError(e.what());
  }
}

inline std::vector<PreparedSample> load_prepared(const std::string& dir) {
  auto samples = read_dataset(dir);
  if (samples.empty()) throw ValidationError("dataset is empty: " + dir);
  return prepare_samples(samples);
}

/// Benchmark split: `n_train` then `n_val` consecutive samples
/// of the dataset seeded by `seed`.
inline std::pair<std::vector<PreparedSample>, std::vector<PreparedSample>> generated_split(
    std::uint64_t seed, std::size_t n_train, std::size_t n_val, const SceneSpec& spec = {}) {
  auto tr = prepare_samples(to_samples(generate_scenes(spec, seed, n_train, 0), 0));
  auto va = prepare_samples(to_samples(generate_scenes(spec, seed, n_val, n_train), n_train));
  return {std::move(tr), std::move(va)};
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Cross-view LiDAR/aerial pose localization"};
  app.name("xmodal");
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_out;
  std::uint64_t gen_seed = 0;
  std::size_t gen_count = 1, gen_offset = 0;
  SceneSpec spec;
  gen->add_option("--out", gen_out, "Dataset directory")->required();
  gen->add_option("--seed", gen_seed, "Base seed");
  gen->add_option("--count", gen_count, "Number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--offset", gen_offset, "Index of the first sample");
  gen->add_option("--tile-size", spec.tile_size, "Tile side in pixels (multiple of 32)");
  gen->add_option("--pixels-per-meter", spec.pixels_per_meter);
  gen->add_option("--buildings", spec.n_buildings);
  gen->add_option("--roads", spec.n_roads);
  gen->add_option("--lidar-rays", spec.lidar_rays);
  gen->add_option("--lidar-range", spec.lidar_range, "meters");
  gen->add_option("--noise-sigma", spec.noise_sigma, "range noise, meters");

  // train
  auto* trn = app.add_subcommand("train", "Train a model");
  std::string trn_config, trn_data, trn_val, trn_out;
  std::uint64_t trn_seed = 0;
  bool trn_det = false;
  std::map<std::string, std::string> trn_over;
  trn->add_option("--config", trn_config, "key = value config file")->check(CLI::ExistingFile);
  trn->add_option("--dataset", trn_data, "Training dataset")->required()->check(CLI::ExistingDirectory);
  trn->add_option("--val-dataset", trn_val, "Validation dataset")->check(CLI::ExistingDirectory);
  trn->add_option("--out", trn_out, "Output directory")->required();
  auto* trn_seed_opt = trn->add_option("--seed", trn_seed, "Training seed");
  trn->add_flag("--deterministic", trn_det, "Single worker");
  detail::add_config_flags(trn, trn_over);

  // eval
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string evl_ck, evl_data, evl_out;
  bool evl_det = false, evl_oracle = false;
  evl->add_option("--checkpoint", evl_ck)->required()->check(CLI::ExistingFile);
  evl->add_option("--dataset", evl_data)->required()->check(CLI::ExistingDirectory);
  evl->add_option("--out", evl_out)->required();
  evl->add_flag("--deterministic", evl_det);
  evl->add_flag("--oracle-predictions", evl_oracle, "Replace predictions by ground truth")->group("");

  // localize
  auto* loc = app.add_subcommand("localize", "Estimate the pose of one sample");
  std::string loc_ck, loc_sample, loc_out;
  loc->add_option("--checkpoint", loc_ck)->required()->check(CLI::ExistingFile);
  loc->add_option("--sample", loc_sample, "Sample directory")->required()->check(CLI::ExistingDirectory);
  loc->add_option("--out", loc_out)->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  std::string gc_module = "all";
  std::uint64_t gc_seed = 0;
  GradCheckOptions gc_opt;
  double gc_tol = 1e-4;
  std::string gc_out;
  gc->add_option("--module", gc_module, "Module name or 'all'");
  gc->add_option("--seed", gc_seed);
  gc->add_option("--coordinates", gc_opt.coordinates)->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", gc_tol);
  gc->add_option("--out", gc_out, "Optional CSV report directory");

  // ablate
  auto* abl = app.add_subcommand("ablate", "Train and evaluate every ablation row");
  std::string abl_config, abl_data, abl_val, abl_out, abl_only;
  std::uint64_t abl_seed = 0;
  std::size_t abl_train = 512, abl_valn = 64;
  bool abl_det = false;
  std::map<std::string, std::string> abl_over;
  abl->add_option("--config", abl_config)->check(CLI::ExistingFile);
  abl->add_option("--dataset", abl_data, "Training dataset (generated when absent)")->check(CLI::ExistingDirectory);
  abl->add_option("--val-dataset", abl_val)->check(CLI::ExistingDirectory);
  abl->add_option("--out", abl_out)->required();
  auto* abl_seed_opt = abl->add_option("--seed", abl_seed, "Data and training seed");
  abl->add_option("--train-count", abl_train, "Generated training samples")->check(CLI::PositiveNumber);
  abl->add_option("--val-count", abl_valn, "Generated validation samples")->check(CLI::PositiveNumber);
  abl->add_option("--only", abl_only, "Comma-separated row names");
  abl->add_flag("--deterministic", abl_det);
  detail::add_config_flags(abl, abl_over);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return 2;
  }

  try {
    if (*gen) {
      try {
        spec.validate();
      } catch (const ValidationError& e) {
        throw detail::UsageError(e.what());
      }
      const auto scenes = generate_scenes(spec, gen_seed, gen_count, gen_offset);
      write_dataset(scenes, gen_out, gen_offset);
      out << "wrote " << scenes.size() << " samples to " << gen_out << "\n";
      return 0;
    }

    if (*trn) {
      const TrainConfig cfg = detail::resolve_config(trn_config, trn_over, *trn_seed_opt ? &trn_seed : nullptr);
      const auto train_set = detail::load_prepared(trn_data);
      const std::vector<PreparedSample> val_set = trn_val.empty() ? std::vector<PreparedSample>{} : detail::load_prepared(trn_val);
      detail::ensure_dir(trn_out);
      detail::write_text(std::filesystem::path(trn_out) / "config.txt", format_train_config(cfg));
      const std::size_t threads = worker_count(trn_det);
      detail::with_precision(cfg.precision, [&](auto tag) {
        using T = decltype(tag);
        Model<T> model(cfg.model);
        train(model, train_set, val_set, cfg, trn_out, threads, [&](const EpochRecord& r) {
          char buf[256];
          std::snprintf(buf, sizeof buf, "epoch %zu train %.6g val %.6g loc_err %.3f m ori_err %.2f deg (%.1fs)\n",
                        r.epoch, r.train.total, r.val.total, r.val_loc_error, r.val_ori_error, r.seconds);
          out << buf << std::flush;
        });
      });
      out << "checkpoint: " << (std::filesystem::path(trn_out) / "checkpoint.bin").string() << "\n";
      return 0;
    }

    if (*evl) {
      const Checkpoint ck = read_checkpoint(evl_ck);
      const TrainConfig cfg = config_from_checkpoint(ck);
      const auto data = detail::load_prepared(evl_data);
      Evaluation ev;
      if (evl_oracle) {
        for (const auto& s : data) {
          ev.ids.push_back(s.id);
          ev.truths.push_back(s.pose);
          PoseEstimate e;
          e.pose = s.pose;
          ev.estimates.push_back(e);
        }
      } else {
        detail::with_precision(cfg.precision, [&](auto tag) {
          using T = decltype(tag);
          Model<T> model(cfg.model);
          detail::load_model(model, ck);
          ev = evaluate(model, data, cfg, worker_count(evl_det));
        });
      }
      const EvalReport report = compute_metrics(ev.estimates, ev.truths, {1, 3, 5}, {1, 3, 5}, ev.ids);
      detail::ensure_dir(evl_out);
      const std::filesystem::path o(evl_out);
      std::ofstream summary(o / "report_summary.csv"), samples(o / "report_samples.csv");
      if (!summary || !samples) throw IoError("cannot write reports under " + evl_out);
      write_report_csv(report, summary, samples);
      const std::string table = format_report_table(report, std::filesystem::path(evl_ck).stem().string());
      detail::write_text(o / "report.txt", table);
      out << table;
      return 0;
    }

    if (*loc) {
      const Checkpoint ck = read_checkpoint(loc_ck);
      const TrainConfig cfg = config_from_checkpoint(ck);
      const std::filesystem::path dir(loc_sample);
      const std::string id = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
      const PreparedSample s = prepare_sample(read_sample(dir, id, 0));
      detail::ensure_dir(loc_out);
      PoseEstimate est;
      detail::with_precision(cfg.precision, [&](auto tag) {
        using T = decltype(tag);
        Model<T> model(cfg.model);
        detail::load_model(model, ck);
        NoGradGuard guard;
        const auto o = model.forward(make_input<T>(s.tile, s.bev));
        if (o.maps) {
          const LikelihoodMaps maps = to_maps(*o.maps);
          est = extract_pose_argmax(maps, s.tile.pixels_per_meter);
          export_heatmap(maps, s.tile, loc_out, id);
        } else {
          est.pose = regression_pose(*o.regression, s.tile.height, s.tile.width, s.tile.pixels_per_meter);
          est.confidence = static_cast<double>(o.regression->confidence->value[0]);
        }
      });
      const std::string row = detail::fmt17(est.pose.x) + "," + detail::fmt17(est.pose.y) + "," +
                              detail::fmt17(est.pose.theta) + "," + detail::fmt17(est.confidence);
      detail::write_text(std::filesystem::path(loc_out) / "pose.csv", "x,y,theta,confidence\n" + row + "\n");
      out << "pose x=" << est.pose.x << " m y=" << est.pose.y << " m theta=" << est.pose.theta
          << " deg confidence=" << est.confidence << "\n";
      return 0;
    }

    if (*gc) {
      std::vector<std::string> modules;
      if (gc_module == "all") {
        modules = gradcheck_modules();
      } else {
        const auto known = gradcheck_modules();
        if (gc_module != "corrupted" && std::find(known.begin(), known.end(), gc_module) == known.end())
          throw detail::UsageError("gradcheck: unknown module '" + gc_module + "'");
        modules = {gc_module};
      }
      bool ok = true;
      std::string csv = "module,coordinates,max_rel_error,worst,pass\n";
      for (const auto& m : modules) {
        const GradCheckReport r = gradient_check(m, gc_seed, gc_opt);
        const bool pass = r.max_rel_error < gc_tol && r.coordinates >= std::min<std::size_t>(200, gc_opt.coordinates);
        ok = ok && pass;
        char buf[256];
        std::snprintf(buf, sizeof buf, "%-22s %5zu coords  max rel %.3e  %s  (worst %s)\n", m.c_str(), r.coordinates,
                      r.max_rel_error, pass ? "PASS" : "FAIL", r.worst.c_str());
        out << buf << std::flush;
        csv += m + "," + std::to_string(r.coordinates) + "," + detail::fmt17(r.max_rel_error) + "," + r.worst + "," +
               (pass ? "true" : "false") + "\n";
      }
      if (!gc_out.empty()) {
        detail::ensure_dir(gc_out);
        detail::write_text(std::filesystem::path(gc_out) / "gradcheck.csv", csv);
      }
      return ok ? 0 : 1;
    }

    if (*abl) {
      TrainConfig base = detail::resolve_config(abl_config, abl_over, *abl_seed_opt ? &abl_seed : nullptr);
      std::vector<AblationRow> rows = ablation_rows(base);
      if (!abl_only.empty()) {
        std::vector<AblationRow> picked;
        std::stringstream ss(abl_only);
        std::string name;
        while (std::getline(ss, name, ',')) {
          auto it = std::find_if(rows.begin(), rows.end(), [&](const AblationRow& r) { return r.name == name; });
          if (it == rows.end()) throw detail::UsageError("ablate: unknown row '" + name + "'");
          picked.push_back(*it);
        }
        rows = picked;
      }
      std::vector<PreparedSample> train_set, val_set;
      if (abl_data.empty()) {
        std::tie(train_set, val_set) = detail::generated_split(abl_seed, abl_train, abl_valn);
      } else {
        if (abl_val.empty()) throw detail::UsageError("ablate: --dataset needs --val-dataset");
        train_set = detail::load_prepared(abl_data);
        val_set = detail::load_prepared(abl_val);
      }
      detail::ensure_dir(abl_out);
      const std::size_t threads = worker_count(abl_det);
      std::vector<AblationResult> results;
      for (const auto& row : rows) {
        out << "ablation row " << row.name << "\n" << std::flush;
        results.push_back(detail::with_precision(row.cfg.precision, [&](auto tag) {
          return run_ablation_row<decltype(tag)>(row, train_set, val_set, abl_out, threads);
        }));
      }
      const std::filesystem::path o(abl_out);
      detail::write_text(o / "ablation.csv", ablation_csv(results));
      detail::write_text(o / "ablation.txt", ablation_table(results));
      const bool has_full = std::any_of(results.begin(), results.end(), [](const AblationResult& r) { return r.row.name == "full"; });
      if (has_full) detail::write_text(o / "ablation_direction.csv", ablation_direction_csv(results));
      out << ablation_table(results);
      return 0;
    }
  } catch (const detail::UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace xmodal
