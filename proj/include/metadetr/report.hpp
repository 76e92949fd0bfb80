#pragma once
#include <string>
#include <vector>

#include "metadetr/evalmetrics.hpp"
#include "metadetr/pipeline.hpp"

namespace metadetr {

// results/table.csv: one row per run/group/threshold plus mean and std
// summary rows.
void write_results_table(const std::string& path, const MultiRunResult& result, int shots);

// Single-evaluation table (eval command).
void write_eval_csv(const std::string& path, const EvalResult& result);

// Bar chart of per-class AP at the first threshold.
void write_ap_bars_svg(const std::string& path, const EvalResult& result);

// Precision/recall polylines, one per labeled series.
void write_pr_svg(const std::string& path,
                  const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>&
                      curves);

// Aggregates results/table.csv files from several run directories into one
// mean/std table per (group, threshold).
void aggregate_run_dirs(const std::vector<std::string>& run_dirs, const std::string& out_csv);

}  // namespace metadetr
