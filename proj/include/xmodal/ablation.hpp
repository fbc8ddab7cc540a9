#pragma once

// Component and loss ablation matrix.

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "xmodal/metrics.hpp"
#include "xmodal/trainer.hpp"

namespace xmodal {

struct AblationRow {
  std::string name;
  std::string group;  ///< "components", "losses" or "reference"
  TrainConfig cfg;
};

/// The full model plus one row per disabled component or loss term.
inline std::vector<AblationRow> ablation_rows(const TrainConfig& base) {
  std::vector<AblationRow> rows;
  auto add = [&](std::string name, std::string group, auto&& tweak) {
    TrainConfig c = base;
    tweak(c);
    rows.push_back({std::move(name), std::move(group), c});
  };
  add("full", "reference", [](TrainConfig&) {});
  add("concat_fusion", "components", [](TrainConfig& c) { c.model.fusion_mode = FusionMode::kConcat; });
  add("single_scale", "components", [](TrainConfig& c) { c.model.use_multiscale = false; });
  add("regression_decoder", "components", [](TrainConfig& c) { c.model.decoder_mode = DecoderMode::kRegression; });
  add("no_reg_loss", "losses", [](TrainConfig& c) { c.loss.use_reg = false; });
  add("no_contrastive", "losses", [](TrainConfig& c) { c.loss.use_contrastive = false; });
  add("no_fourier", "losses", [](TrainConfig& c) { c.model.use_fourier = false; });
  return rows;
}

struct AblationResult {
  AblationRow row;
  EvalReport report;
  double first_val_loss = 0;
  double final_val_loss = 0;
};

template <typename T>
AblationResult run_ablation_row(const AblationRow& row, const std::vector<PreparedSample>& train_set,
                                const std::vector<PreparedSample>& val_set, const std::filesystem::path& out_dir,
                                std::size_t threads = 1) {
  if (val_set.empty()) throw ValidationError("ablation needs a validation set");
  Model<T> model(row.cfg.model);
  const auto records = train(model, train_set, val_set, row.cfg, out_dir / row.name, threads);
  const auto ev = evaluate(model, val_set, row.cfg, threads);
  AblationResult r{row, compute_metrics(ev.estimates, ev.truths, {1, 3, 5}, {1, 3, 5}, ev.ids), 0, 0};
  if (!records.empty()) {
    r.first_val_loss = records.front().val.total;
    r.final_val_loss = records.back().val.total;
  }
  return r;
}

inline std::vector<std::pair<std::string, std::string>> ablation_toggle_columns(const TrainConfig& c) {
  return {{"fusion_mode", to_string(c.model.fusion_mode)},
          {"use_multiscale", c.model.use_multiscale ? "true" : "false"},
          {"decoder", to_string(c.model.decoder_mode)},
          {"use_reg", c.loss.use_reg ? "true" : "false"},
          {"use_contrastive", c.loss.use_contrastive ? "true" : "false"},
          {"use_fourier", c.model.use_fourier ? "true" : "false"}};
}

/// One header plus one row per result: name, group, toggles, then the
/// EvalReport summary columns.
inline std::string ablation_csv(const std::vector<AblationResult>& results) {
  if (results.empty()) throw ValidationError("ablation_csv: no results");
  std::ostringstream os;
  os << "config,group";
  for (const auto& [k, v] : ablation_toggle_columns(results.front().row.cfg)) os << ',' << k;
  os << ',' << report_csv_header(results.front().report) << ",first_val_loss,final_val_loss\n";
  for (const auto& r : results) {
    os << r.row.name << ',' << r.row.group;
    for (const auto& [k, v] : ablation_toggle_columns(r.row.cfg)) os << ',' << v;
    os << ',' << report_csv_values(r.report) << ',' << detail::fmt17(r.first_val_loss) << ','
       << detail::fmt17(r.final_val_loss) << '\n';
  }
  return os.str();
}

/// Per ablated row: whether it is worse than "full" on each mean error, which
/// is the expected direction for every row.
inline std::string ablation_direction_csv(const std::vector<AblationResult>& results) {
  const AblationResult* full = nullptr;
  for (const auto& r : results)
    if (r.row.name == "full") full = &r;
  if (!full) throw ValidationError("ablation_direction_csv: no full row");
  std::ostringstream os;
  os << "config,loc_error_delta_m,ori_error_delta_deg,loc_worse_than_full,ori_worse_than_full\n";
  for (const auto& r : results) {
    if (&r == full) continue;
    const double dl = r.report.mean_loc_error - full->report.mean_loc_error;
    const double dort = r.report.mean_ori_error - full->report.mean_ori_error;
    os << r.row.name << ',' << detail::fmt17(dl) << ',' << detail::fmt17(dort) << ',' << (dl > 0 ? "yes" : "no")
       << ',' << (dort > 0 ? "yes" : "no") << '\n';
  }
  return os.str();
}

inline std::string ablation_table(const std::vector<AblationResult>& results) {
  std::string out;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const std::string t = format_report_table(results[i].report, results[i].row.name);
    out += i == 0 ? t : t.substr(t.find('\n') + 1);
  }
  return out;
}

}  // namespace xmodal
