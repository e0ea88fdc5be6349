#pragma once

// Long-format CSV tables and static SVG figures for analysis reports.

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace ia::cli {

// Shortest text that round-trips (printf %.17g).
std::string format_number(double v);

class CsvWriter {
public:
    CsvWriter(const std::filesystem::path &path, std::string_view header);

    CsvWriter &cell(std::string_view s);
    CsvWriter &cell(double v);
    CsvWriter &cell(std::size_t v);
    void end_row();
    void close();

private:
    std::filesystem::path path_;
    std::ofstream out_;
    bool first_ = true;
};

struct PlotSeries {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
    std::vector<double> band; // +/- half-width around y; empty for none
};

void write_line_plot(const std::filesystem::path &path, std::string_view title, std::string_view x_label,
                     std::string_view y_label, const std::vector<PlotSeries> &series);

void write_heatmap(const std::filesystem::path &path, std::string_view title, const std::vector<std::string> &labels,
                   const std::vector<std::vector<double>> &values);

void write_scatter(const std::filesystem::path &path, std::string_view title, std::string_view x_label,
                   std::string_view y_label, const std::vector<PlotSeries> &series, bool log_x);

} // namespace ia::cli
