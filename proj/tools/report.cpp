#include "report.hpp"

#include "ia/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace ia::cli {

std::string format_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

CsvWriter::CsvWriter(const std::filesystem::path &path, std::string_view header) : path_(path), out_(path) {
    if (!out_) throw IoError("cannot write " + path.string());
    out_ << header << '\n';
}

CsvWriter &CsvWriter::cell(std::string_view s) {
    if (!first_) out_ << ',';
    first_ = false;
    if (s.find_first_of(",\"\n") == std::string_view::npos) {
        out_ << s;
    } else {
        out_ << '"';
        for (char c : s) {
            if (c == '"') out_ << '"';
            out_ << c;
        }
        out_ << '"';
    }
    return *this;
}

CsvWriter &CsvWriter::cell(double v) { return cell(std::string_view(format_number(v))); }

CsvWriter &CsvWriter::cell(std::size_t v) { return cell(std::string_view(std::to_string(v))); }

void CsvWriter::end_row() {
    out_ << '\n';
    first_ = true;
}

void CsvWriter::close() {
    out_.close();
    if (!out_) throw IoError("failed writing " + path_.string());
}

namespace {

constexpr const char *kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

constexpr double kWidth = 640, kHeight = 420, kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;

std::string escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

struct Axes {
    double x0, x1, y0, y1;
    bool log_x = false;

    double px(double x) const {
        const double a = log_x ? std::log10(x0) : x0, b = log_x ? std::log10(x1) : x1;
        const double v = log_x ? std::log10(x) : x;
        return kLeft + (b > a ? (v - a) / (b - a) : 0.5) * (kWidth - kLeft - kRight);
    }
    double py(double y) const {
        return kHeight - kBottom - (y1 > y0 ? (y - y0) / (y1 - y0) : 0.5) * (kHeight - kTop - kBottom);
    }
};

Axes fit(const std::vector<PlotSeries> &series, bool log_x) {
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto &s : series) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (log_x && !(s.x[i] > 0)) continue;
            const double b = s.band.empty() ? 0.0 : s.band[i];
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i] - b);
            y1 = std::max(y1, s.y[i] + b);
        }
    }
    if (!std::isfinite(x0)) return {0, 1, 0, 1, log_x};
    if (y1 == y0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    const double pad = 0.05 * (y1 - y0);
    return {x0, x1, y0 - pad, y1 + pad, log_x};
}

void frame(std::ostream &o, const Axes &ax, std::string_view title, std::string_view xl, std::string_view yl) {
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
      << "</text>\n";
    const double xa = kLeft, xb = kWidth - kRight, ya = kHeight - kBottom, yb = kTop;
    o << "<rect x=\"" << xa << "\" y=\"" << yb << "\" width=\"" << xb - xa << "\" height=\"" << ya - yb
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fy = ax.y0 + (ax.y1 - ax.y0) * i / 4.0;
        o << "<text x=\"" << xa - 6 << "\" y=\"" << num(ax.py(fy) + 4) << "\" text-anchor=\"end\">" << tick(fy)
          << "</text>\n";
        double fx;
        if (ax.log_x) {
            fx = std::pow(10.0, std::log10(ax.x0) + (std::log10(ax.x1) - std::log10(ax.x0)) * i / 4.0);
        } else {
            fx = ax.x0 + (ax.x1 - ax.x0) * i / 4.0;
        }
        o << "<text x=\"" << num(ax.px(fx)) << "\" y=\"" << ya + 16 << "\" text-anchor=\"middle\">" << tick(fx)
          << "</text>\n";
    }
    o << "<text x=\"" << (xa + xb) / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">" << escape(xl)
      << "</text>\n";
    o << "<text transform=\"translate(16," << (ya + yb) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(yl) << "</text>\n";
}

void legend(std::ostream &o, const std::vector<PlotSeries> &series) {
    for (std::size_t i = 0; i < series.size(); ++i) {
        const double y = kTop + 14 + 18 * static_cast<double>(i);
        const char *c = kPalette[i % std::size(kPalette)];
        o << "<rect x=\"" << kWidth - kRight + 12 << "\" y=\"" << y - 9 << "\" width=\"12\" height=\"12\" fill=\"" << c
          << "\"/>\n";
        o << "<text x=\"" << kWidth - kRight + 30 << "\" y=\"" << y + 1 << "\">" << escape(series[i].name)
          << "</text>\n";
    }
}

void save(const std::filesystem::path &path, const std::string &svg) {
    std::ofstream out(path);
    out << svg;
    if (!out) throw IoError("cannot write " + path.string());
}

} // namespace

void write_line_plot(const std::filesystem::path &path, std::string_view title, std::string_view x_label,
                     std::string_view y_label, const std::vector<PlotSeries> &series) {
    std::ostringstream o;
    const Axes ax = fit(series, false);
    frame(o, ax, title, x_label, y_label);
    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto &ps = series[s];
        const char *c = kPalette[s % std::size(kPalette)];
        if (!ps.band.empty() && !ps.x.empty()) {
            o << "<polygon fill=\"" << c << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
            for (std::size_t i = 0; i < ps.x.size(); ++i) o << num(ax.px(ps.x[i])) << ',' << num(ax.py(ps.y[i] + ps.band[i])) << ' ';
            for (std::size_t i = ps.x.size(); i-- > 0;) o << num(ax.px(ps.x[i])) << ',' << num(ax.py(ps.y[i] - ps.band[i])) << ' ';
            o << "\"/>\n";
        }
        o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < ps.x.size(); ++i) o << num(ax.px(ps.x[i])) << ',' << num(ax.py(ps.y[i])) << ' ';
        o << "\"/>\n";
    }
    legend(o, series);
    o << "</svg>\n";
    save(path, o.str());
}

void write_scatter(const std::filesystem::path &path, std::string_view title, std::string_view x_label,
                   std::string_view y_label, const std::vector<PlotSeries> &series, bool log_x) {
    std::ostringstream o;
    const Axes ax = fit(series, log_x);
    frame(o, ax, title, x_label, y_label);
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char *c = kPalette[s % std::size(kPalette)];
        for (std::size_t i = 0; i < series[s].x.size(); ++i) {
            if (log_x && !(series[s].x[i] > 0)) continue;
            o << "<circle cx=\"" << num(ax.px(series[s].x[i])) << "\" cy=\"" << num(ax.py(series[s].y[i]))
              << "\" r=\"3\" fill=\"" << c << "\" fill-opacity=\"0.7\"/>\n";
        }
    }
    legend(o, series);
    o << "</svg>\n";
    save(path, o.str());
}

void write_heatmap(const std::filesystem::path &path, std::string_view title, const std::vector<std::string> &labels,
                   const std::vector<std::vector<double>> &values) {
    const std::size_t n = labels.size();
    const double cell = n == 0 ? 0.0 : std::min(48.0, 360.0 / static_cast<double>(n));
    const double left = 140, top = 50;
    const double w = left + cell * static_cast<double>(n) + 90, h = top + cell * static_cast<double>(n) + 140;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto &row : values) {
        for (double v : row) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (!(hi > lo)) hi = lo + 1.0;
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title) << "</text>\n";
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double t = (values[i][j] - lo) / (hi - lo);
            const int r = static_cast<int>(255 - 200 * t), g = static_cast<int>(255 - 150 * t), b = 255;
            o << "<rect x=\"" << num(left + cell * j) << "\" y=\"" << num(top + cell * i) << "\" width=\"" << num(cell)
              << "\" height=\"" << num(cell) << "\" fill=\"rgb(" << r << ',' << g << ',' << b << ")\"/>\n";
        }
        o << "<text x=\"" << left - 6 << "\" y=\"" << num(top + cell * (i + 0.5) + 4) << "\" text-anchor=\"end\">"
          << escape(labels[i]) << "</text>\n";
        o << "<text transform=\"translate(" << num(left + cell * (i + 0.5) + 4) << ','
          << num(top + cell * static_cast<double>(n) + 8) << ") rotate(60)\">" << escape(labels[i]) << "</text>\n";
    }
    o << "<text x=\"" << num(left + cell * static_cast<double>(n) + 10) << "\" y=\"" << top + 10 << "\">max "
      << tick(hi) << "</text>\n";
    o << "<text x=\"" << num(left + cell * static_cast<double>(n) + 10) << "\" y=\"" << top + 26 << "\">min "
      << tick(lo) << "</text>\n";
    o << "</svg>\n";
    save(path, o.str());
}

} // namespace ia::cli
