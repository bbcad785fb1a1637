#pragma once

#include <string>
#include <utility>
#include <vector>

namespace ipstor {

struct LineChart
{
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<std::pair<double, double>> points;
};

/// Standalone SVG document with axes, tick labels and one polyline.
std::string render_svg(const LineChart& chart);

} // namespace ipstor
