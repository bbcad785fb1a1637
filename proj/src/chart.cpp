#include "ipstor/chart.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace ipstor {

namespace {

constexpr double kWidth = 720;
constexpr double kHeight = 420;
constexpr double kLeft = 80;
constexpr double kRight = 20;
constexpr double kTop = 40;
constexpr double kBottom = 60;

std::string escape(const std::string& s)
{
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

// 1, 2 or 5 times a power of ten, giving about five ticks.
double nice_step(double span)
{
    if (!(span > 0))
        return 1;
    const double raw = span / 5;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    const double r = raw / mag;
    return (r < 1.5 ? 1 : r < 3.5 ? 2 : r < 7.5 ? 5 : 10) * mag;
}

} // namespace

std::string render_svg(const LineChart& chart)
{
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (!chart.points.empty()) {
        x0 = x1 = chart.points.front().first;
        y1 = chart.points.front().second;
        for (const auto& [x, y] : chart.points) {
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y1 = std::max(y1, y);
        }
        y0 = 0;
        if (x1 == x0)
            x1 = x0 + 1;
        if (y1 <= y0)
            y1 = y0 + 1;
    }
    const double pw = kWidth - kLeft - kRight;
    const double ph = kHeight - kTop - kBottom;
    auto sx = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
    auto sy = [&](double y) { return kTop + ph - (y - y0) / (y1 - y0) * ph; };

    std::string out = fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
        "font-family=\"sans-serif\" font-size=\"12\">\n",
        kWidth, kHeight);
    out += fmt::format("<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n", kWidth, kHeight);
    out += fmt::format("<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
                       kWidth / 2, escape(chart.title));

    const double xs = nice_step(x1 - x0);
    for (double t = std::ceil(x0 / xs) * xs; t <= x1 + xs * 1e-9; t += xs) {
        out += fmt::format("<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{0:.2f}\" y2=\"{2:.2f}\" stroke=\"#ddd\"/>\n",
                           sx(t), kTop, kTop + ph);
        out += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\">{:g}</text>\n", sx(t),
                           kTop + ph + 16, t);
    }
    const double ys = nice_step(y1 - y0);
    for (double t = std::ceil(y0 / ys) * ys; t <= y1 + ys * 1e-9; t += ys) {
        out += fmt::format("<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{2:.2f}\" y2=\"{1:.2f}\" stroke=\"#ddd\"/>\n",
                           kLeft, sy(t), kLeft + pw);
        out += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"end\">{:g}</text>\n", kLeft - 6,
                           sy(t) + 4, t);
    }
    out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
                       kLeft, kTop, pw, ph);
    out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", kLeft + pw / 2,
                       kHeight - 16, escape(chart.x_label));
    out += fmt::format("<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{1}</text>\n",
                       kTop + ph / 2, escape(chart.y_label));

    if (!chart.points.empty()) {
        out += "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < chart.points.size(); ++i)
            out += fmt::format("{}{:.2f},{:.2f}", i ? " " : "", sx(chart.points[i].first),
                               sy(chart.points[i].second));
        out += "\"/>\n";
    }
    out += "</svg>\n";
    return out;
}

} // namespace ipstor
