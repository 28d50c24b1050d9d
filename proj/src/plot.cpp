#include "forge/plot.hpp"

#include "forge/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace forge {

namespace {

std::string esc(const std::string & s) {
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

} // namespace

std::string render_svg(const LinePlot & plot) {
    constexpr double W = 720, H = 440, ml = 70, mr = 160, mt = 40, mb = 55;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto & s : plot.series) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) {
                continue;
            }
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (!std::isfinite(x0)) {
        x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    }
    if (x1 == x0) {
        x1 = x0 + 1;
    }
    if (y1 == y0) {
        y1 = y0 + 1;
    }
    y0 = std::min(y0, 0.0);
    const double pw = W - ml - mr, ph = H - mt - mb;
    auto sx = [&](double x) { return ml + (x - x0) / (x1 - x0) * pw; };
    auto sy = [&](double y) { return mt + ph - (y - y0) / (y1 - y0) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<defs><marker id=\"arrow\" markerWidth=\"10\" markerHeight=\"10\" refX=\"5\" refY=\"5\" orient=\"auto\">"
         "<path d=\"M0,0 L10,5 L0,10 z\" fill=\"#d62728\"/></marker></defs>\n";
    o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(plot.title) << "</text>\n";
    o << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#333\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double xv = x0 + (x1 - x0) * i / 5.0;
        const double yv = y0 + (y1 - y0) * i / 5.0;
        o << "<text x=\"" << num(sx(xv)) << "\" y=\"" << num(mt + ph + 18) << "\" text-anchor=\"middle\">" << tick(xv)
          << "</text>\n";
        o << "<text x=\"" << num(ml - 6) << "\" y=\"" << num(sy(yv) + 4) << "\" text-anchor=\"end\">" << tick(yv)
          << "</text>\n";
        o << "<line x1=\"" << ml << "\" x2=\"" << ml + pw << "\" y1=\"" << num(sy(yv)) << "\" y2=\"" << num(sy(yv))
          << "\" stroke=\"#eee\"/>\n";
    }
    o << "<text x=\"" << num(ml + pw / 2) << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << esc(plot.x_label)
      << "</text>\n";
    o << "<text transform=\"translate(18," << num(mt + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
      << esc(plot.y_label) << "</text>\n";
    for (const auto & s : plot.series) {
        o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"" << s.width << "\" stroke-opacity=\""
          << s.opacity << "\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (std::isfinite(s.y[i])) {
                o << num(sx(s.x[i])) << ',' << num(sy(s.y[i])) << ' ';
            }
        }
        o << "\"/>\n";
    }
    if (plot.arrow_x) {
        const double ax = sx(*plot.arrow_x);
        o << "<line x1=\"" << num(ax) << "\" y1=\"" << mt << "\" x2=\"" << num(ax) << "\" y2=\"" << mt + ph
          << "\" stroke=\"#d62728\" stroke-dasharray=\"4 3\"/>\n";
        o << "<line x1=\"" << num(ax) << "\" y1=\"" << mt + 4 << "\" x2=\"" << num(ax) << "\" y2=\"" << mt + ph * 0.25
          << "\" stroke=\"#d62728\" stroke-width=\"2\" marker-end=\"url(#arrow)\"/>\n";
        o << "<text x=\"" << num(ax + 5) << "\" y=\"" << mt + 14 << "\" fill=\"#d62728\">" << esc(plot.arrow_label)
          << "</text>\n";
    }
    if (plot.legend) {
        double ly = mt + 10;
        for (const auto & s : plot.series) {
            if (s.label.empty()) {
                continue;
            }
            o << "<line x1=\"" << ml + pw + 12 << "\" x2=\"" << ml + pw + 32 << "\" y1=\"" << ly << "\" y2=\"" << ly
              << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"/>\n";
            o << "<text x=\"" << ml + pw + 36 << "\" y=\"" << ly + 4 << "\">" << esc(s.label) << "</text>\n";
            ly += 18;
        }
    }
    o << "</svg>\n";
    return o.str();
}

void write_text_file(const std::string & path, const std::string & contents) {
    std::ofstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorKind::input, "cannot write " + path);
    f << contents;
}

} // namespace forge
