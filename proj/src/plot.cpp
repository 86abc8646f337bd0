#include "skd/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace skd {

namespace fs = std::filesystem;

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 64, kRight = 150, kTop = 36, kBottom = 48;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

}  // namespace

std::string line_chart_svg(const std::vector<Series>& series, const std::string& title,
                           const std::string& x_label, const std::string& y_label) {
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size()) throw std::invalid_argument("series '" + s.label + "' has ragged data");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x0 -= 0.5, x1 += 0.5;
    if (y1 == y0) y0 -= 0.5, y1 += 0.5;
    const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
    auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return kTop + (1 - (y - y0) / (y1 - y0)) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kLeft + pw / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
      << "</text>\n"
      << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double xv = x0 + (x1 - x0) * t / 4, yv = y0 + (y1 - y0) * t / 4;
        o << "<text x=\"" << px(xv) << "\" y=\"" << kTop + ph + 16 << "\" text-anchor=\"middle\">" << num(xv)
          << "</text>\n"
          << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv)
          << "</text>\n"
          << "<line x1=\"" << kLeft << "\" x2=\"" << kLeft + pw << "\" y1=\"" << py(yv) << "\" y2=\"" << py(yv)
          << "\" stroke=\"#ddd\"/>\n";
    }
    o << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 10 << "\" text-anchor=\"middle\">"
      << escape(x_label) << "</text>\n"
      << "<text transform=\"translate(16," << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(y_label) << "</text>\n";

    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = kPalette[k % std::size(kPalette)];
        o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) o << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
        o << "\"/>\n";
        if (s.x.size() <= 32)
            for (std::size_t i = 0; i < s.x.size(); ++i)
                if (std::isfinite(s.x[i]) && std::isfinite(s.y[i]))
                    o << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"" << color
                      << "\"/>\n";
        const double ly = kTop + 14 + 16.0 * static_cast<double>(k);
        o << "<line x1=\"" << kWidth - kRight + 12 << "\" x2=\"" << kWidth - kRight + 32 << "\" y1=\"" << ly - 4
          << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
          << "<text x=\"" << kWidth - kRight + 38 << "\" y=\"" << ly << "\">" << escape(s.label) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

std::string accuracy_svg(const std::vector<RunReport>& reports) {
    std::vector<Series> series;
    for (const auto& r : reports) {
        Series s{r.name, {}, r.per_task_top1};
        for (int c : r.seen_classes) s.x.push_back(c);
        series.push_back(std::move(s));
    }
    return line_chart_svg(series, "Top-1 accuracy", "classes seen", "top-1 (%)");
}

std::string trace_svg(const fs::path& csv, const std::string& title) {
    std::ifstream in(csv);
    if (!in) throw std::runtime_error("cannot open trace " + csv.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty trace " + csv.string());
    const auto header = split_csv(line);
    std::vector<Series> series;
    std::vector<std::size_t> cols;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (header[c] == "step" || header[c] == "epoch" || header[c] == "phase") continue;
        cols.push_back(c);
        series.push_back({header[c], {}, {}});
    }
    double row = 0;
    while (std::getline(in, line)) {
        const auto cells = split_csv(line);
        for (std::size_t k = 0; k < cols.size(); ++k) {
            if (cols[k] >= cells.size() || cells[cols[k]].empty()) continue;
            try {
                series[k].y.push_back(std::stod(cells[cols[k]]));
                series[k].x.push_back(row);
            } catch (const std::logic_error&) {
                throw std::runtime_error("malformed trace row in " + csv.string() + ": " + line);
            }
        }
        row += 1;
    }
    return line_chart_svg(series, title, "row", "value");
}

std::vector<fs::path> cmd_plot(const std::vector<fs::path>& reports, const fs::path& out_dir) {
    if (reports.empty()) throw std::invalid_argument("plot needs at least one report");
    std::vector<RunReport> loaded;
    for (const auto& p : reports) loaded.push_back(load_report(p));
    fs::create_directories(out_dir);
    std::vector<fs::path> written;
    auto emit = [&](const fs::path& file, const std::string& svg) {
        std::ofstream out(file);
        if (!out) throw std::runtime_error("cannot write " + file.string());
        out << svg;
        written.push_back(file);
    };
    emit(out_dir / "accuracy.svg", accuracy_svg(loaded));
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        for (const auto& t : loaded[i].trace_files) {
            const auto csv = reports[i].parent_path() / t;
            if (!fs::exists(csv)) continue;
            const auto stem = fs::path(t).stem().string();
            emit(out_dir / (loaded[i].name + "_" + stem + ".svg"), trace_svg(csv, loaded[i].name + " " + stem));
        }
    }
    return written;
}

}  // namespace skd
