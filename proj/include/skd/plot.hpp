#pragma once

// SVG line charts for run reports and loss traces.

#include "skd/evalkit.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace skd {

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

/// Standalone SVG document with one polyline per series and a legend.
std::string line_chart_svg(const std::vector<Series>& series, const std::string& title,
                           const std::string& x_label, const std::string& y_label);

/// Top-1 against the number of seen classes, one series per report.
std::string accuracy_svg(const std::vector<RunReport>& reports);

/// Every numeric column of a trace CSV except step and epoch, against the row index.
/// Empty cells are skipped.
std::string trace_svg(const std::filesystem::path& csv, const std::string& title);

/// Writes accuracy.svg plus one chart per trace file referenced by each report (resolved
/// next to the report). Returns the written paths.
std::vector<std::filesystem::path> cmd_plot(const std::vector<std::filesystem::path>& reports,
                                            const std::filesystem::path& out_dir);

}  // namespace skd
