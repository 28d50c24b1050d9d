#pragma once

#include <optional>
#include <string>
#include <vector>

namespace forge {

struct PlotSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
    std::string color = "#1f77b4";
    double width = 1.0;
    double opacity = 1.0;
};

struct LinePlot {
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<PlotSeries> series;
    std::optional<double> arrow_x;  // vertical marker with an arrow head
    std::string arrow_label;
    bool legend = true;
};

// Minimal standalone SVG line chart.
std::string render_svg(const LinePlot & plot);
void write_text_file(const std::string & path, const std::string & contents);

} // namespace forge
