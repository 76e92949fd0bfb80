#include "metadetr/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace metadetr {

void write_results_table(const std::string& path, const MultiRunResult& result, int shots) {
  std::ofstream os(path);
  check(os.good(), "cannot write results table: " + path);
  os << "seed,shots,group,iou_thr,map_before,map_after\n";
  const std::vector<std::string> groups{"base", "novel", "all"};
  const std::vector<double> thrs{0.5, 0.75};
  for (const auto& run : result.runs) {
    for (const auto& g : groups) {
      if (!run.after.map_groups.count(g)) continue;
      for (double t : thrs)
        os << run.seed << "," << shots << "," << g << "," << t << ","
           << run.before.map_at(g, t) << "," << run.after.map_at(g, t) << "\n";
    }
  }
  for (const auto& g : groups) {
    if (result.runs.empty() || !result.runs[0].after.map_groups.count(g)) continue;
    for (double t : thrs) {
      os << "mean," << shots << "," << g << "," << t << "," << result.mean(g, t, false) << ","
         << result.mean(g, t, true) << "\n";
      os << "std," << shots << "," << g << "," << t << "," << result.stddev(g, t, false) << ","
         << result.stddev(g, t, true) << "\n";
    }
  }
}

void write_eval_csv(const std::string& path, const EvalResult& result) {
  std::ofstream os(path);
  check(os.good(), "cannot write eval table: " + path);
  os << "class_id";
  for (double t : result.iou_thresholds) os << ",ap@" << t;
  os << "\n";
  for (const auto& [cid, aps] : result.ap_per_class) {
    os << cid;
    for (double ap : aps) os << "," << ap;
    os << "\n";
  }
  for (const auto& [group, maps] : result.map_groups) {
    os << "mAP:" << group;
    for (double v : maps) os << "," << v;
    os << "\n";
  }
}

namespace {

constexpr int kW = 640, kH = 400, kMargin = 50;

void svg_header(std::ostream& os) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

void svg_axes(std::ostream& os, const std::string& xlabel, const std::string& ylabel) {
  os << "<line x1=\"" << kMargin << "\" y1=\"" << kH - kMargin << "\" x2=\"" << kW - kMargin / 2
     << "\" y2=\"" << kH - kMargin << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << kMargin << "\" y1=\"" << kH - kMargin << "\" x2=\"" << kMargin
     << "\" y2=\"" << kMargin / 2 << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 8 << "\" font-size=\"13\">" << xlabel
     << "</text>\n"
     << "<text x=\"12\" y=\"" << kH / 2 << "\" font-size=\"13\" transform=\"rotate(-90 12 "
     << kH / 2 << ")\">" << ylabel << "</text>\n";
}

}  // namespace

void write_ap_bars_svg(const std::string& path, const EvalResult& result) {
  std::ofstream os(path);
  check(os.good(), "cannot write svg: " + path);
  svg_header(os);
  svg_axes(os, "class id", "AP@" + std::to_string(result.iou_thresholds.empty()
                                                      ? 0.5
                                                      : result.iou_thresholds[0]));
  int n = static_cast<int>(result.ap_per_class.size());
  if (n > 0) {
    double span = kW - 1.5 * kMargin;
    double bw = span / n * 0.7;
    int i = 0;
    for (const auto& [cid, aps] : result.ap_per_class) {
      double x = kMargin + span * (i + 0.15) / n;
      double h = (kH - 1.5 * kMargin) * aps[0];
      os << "<rect x=\"" << x << "\" y=\"" << kH - kMargin - h << "\" width=\"" << bw
         << "\" height=\"" << h << "\" fill=\"steelblue\"/>\n";
      os << "<text x=\"" << x + bw / 2 - 5 << "\" y=\"" << kH - kMargin + 16
         << "\" font-size=\"11\">" << cid << "</text>\n";
      ++i;
    }
  }
  os << "</svg>\n";
}

void write_pr_svg(const std::string& path,
                  const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>&
                      curves) {
  std::ofstream os(path);
  check(os.good(), "cannot write svg: " + path);
  svg_header(os);
  svg_axes(os, "recall", "precision");
  const char* colors[] = {"steelblue", "crimson", "seagreen", "darkorange", "purple", "teal"};
  double span_x = kW - 1.5 * kMargin;
  double span_y = kH - 1.5 * kMargin;
  int ci = 0;
  for (const auto& [label, pts] : curves) {
    const char* color = colors[ci % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [r, p] : pts)
      os << kMargin + r * span_x << "," << kH - kMargin - p * span_y << " ";
    os << "\"/>\n";
    os << "<text x=\"" << kW - 150 << "\" y=\"" << kMargin + 16 * ci << "\" fill=\"" << color
       << "\" font-size=\"12\">" << label << "</text>\n";
    ++ci;
  }
  os << "</svg>\n";
}

void aggregate_run_dirs(const std::vector<std::string>& run_dirs, const std::string& out_csv) {
  check(!run_dirs.empty(), "report: no run directories given");
  struct Key {
    std::string group;
    std::string thr;
    bool operator<(const Key& o) const {
      return group != o.group ? group < o.group : thr < o.thr;
    }
  };
  std::map<Key, std::vector<std::pair<double, double>>> cells;  // (before, after)
  for (const auto& dir : run_dirs) {
    std::ifstream is(dir + "/results/table.csv");
    check(is.good(), "report: cannot open " + dir + "/results/table.csv");
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
      std::stringstream ss(line);
      std::string seed, shots, group, thr, before, after;
      std::getline(ss, seed, ',');
      std::getline(ss, shots, ',');
      std::getline(ss, group, ',');
      std::getline(ss, thr, ',');
      std::getline(ss, before, ',');
      std::getline(ss, after, ',');
      if (seed == "mean" || seed == "std") continue;
      cells[{group, thr}].emplace_back(std::stod(before), std::stod(after));
    }
  }
  std::ofstream os(out_csv);
  check(os.good(), "report: cannot write " + out_csv);
  os << "group,iou_thr,runs,mean_before,std_before,mean_after,std_after\n";
  for (const auto& [key, vals] : cells) {
    double mb = 0, ma = 0;
    for (auto& [b, a] : vals) {
      mb += b;
      ma += a;
    }
    mb /= vals.size();
    ma /= vals.size();
    double sb = 0, sa = 0;
    for (auto& [b, a] : vals) {
      sb += (b - mb) * (b - mb);
      sa += (a - ma) * (a - ma);
    }
    sb = std::sqrt(sb / vals.size());
    sa = std::sqrt(sa / vals.size());
    os << key.group << "," << key.thr << "," << vals.size() << "," << mb << "," << sb << ","
       << ma << "," << sa << "\n";
  }
}

}  // namespace metadetr
