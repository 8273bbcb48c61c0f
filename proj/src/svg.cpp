#include "expecta/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace expecta::svg {

namespace {

constexpr double kPanelW = 320, kPanelH = 220;
constexpr double kLeft = 48, kRight = 12, kTop = 28, kBottom = 40;

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string tick(double v) {
    char buf[32];
    if (std::abs(v) >= 1000 || (v != 0 && std::abs(v) < 0.01))
        std::snprintf(buf, sizeof buf, "%.2g", v);
    else
        std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        default: out += c;
        }
    }
    return out;
}

struct Range {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    void add(double v) {
        if (!std::isfinite(v)) return;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    void settle() {
        if (!std::isfinite(lo)) lo = 0, hi = 1;
        if (hi <= lo) hi = lo + 1;
    }
};

struct Frame {
    double ox, oy, w, h;
    Range xr, yr;
    double px(double x) const { return ox + kLeft + (x - xr.lo) / (xr.hi - xr.lo) * w; }
    double py(double y) const { return oy + kTop + h - (y - yr.lo) / (yr.hi - yr.lo) * h; }
};

void axes(std::ostringstream& os, const Frame& f, const Panel& p, bool numeric_x) {
    os << "<text x=\"" << num(f.ox + kLeft + f.w / 2) << "\" y=\"" << num(f.oy + 16)
       << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(p.title) << "</text>\n";
    os << "<line x1=\"" << num(f.px(f.xr.lo)) << "\" y1=\"" << num(f.py(f.yr.lo)) << "\" x2=\""
       << num(f.px(f.xr.hi)) << "\" y2=\"" << num(f.py(f.yr.lo)) << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << num(f.px(f.xr.lo)) << "\" y1=\"" << num(f.py(f.yr.lo)) << "\" x2=\""
       << num(f.px(f.xr.lo)) << "\" y2=\"" << num(f.py(f.yr.hi)) << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double y = f.yr.lo + (f.yr.hi - f.yr.lo) * i / 4;
        os << "<text x=\"" << num(f.px(f.xr.lo) - 4) << "\" y=\"" << num(f.py(y) + 3)
           << "\" text-anchor=\"end\" font-size=\"9\">" << tick(y) << "</text>\n";
        if (numeric_x) {
            const double x = f.xr.lo + (f.xr.hi - f.xr.lo) * i / 4;
            os << "<text x=\"" << num(f.px(x)) << "\" y=\"" << num(f.py(f.yr.lo) + 12)
               << "\" text-anchor=\"middle\" font-size=\"9\">" << tick(x) << "</text>\n";
        }
    }
    os << "<text x=\"" << num(f.ox + kLeft + f.w / 2) << "\" y=\"" << num(f.oy + kPanelH - 6)
       << "\" text-anchor=\"middle\" font-size=\"10\">" << escape(p.x_label) << "</text>\n";
    os << "<text transform=\"translate(" << num(f.ox + 11) << "," << num(f.oy + kTop + f.h / 2)
       << ") rotate(-90)\" text-anchor=\"middle\" font-size=\"10\">" << escape(p.y_label) << "</text>\n";
}

void legend(std::ostringstream& os, const Frame& f, const Panel& p) {
    double y = f.oy + kTop + 6;
    for (std::size_t s = 0; s < p.series.size(); ++s) {
        if (p.series[s].label.empty()) continue;
        const auto& color = p.series[s].color.empty() ? palette(s) : p.series[s].color;
        const double x = f.ox + kPanelW - kRight - 90;
        os << "<rect x=\"" << num(x) << "\" y=\"" << num(y - 7) << "\" width=\"8\" height=\"8\" fill=\""
           << color << "\" fill-opacity=\"0.6\"/>";
        os << "<text x=\"" << num(x + 12) << "\" y=\"" << num(y) << "\" font-size=\"9\">"
           << escape(p.series[s].label) << "</text>\n";
        y += 12;
    }
}

} // namespace

const std::string& palette(std::size_t i) {
    static const std::vector<std::string> colors{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                                 "#9467bd", "#8c564b", "#17becf"};
    return colors[i % colors.size()];
}

std::string figure(const std::vector<Panel>& panels, PanelKind kind, int columns,
                   const std::vector<std::string>& categories) {
    columns = std::max(1, columns);
    const int rows = static_cast<int>((panels.size() + columns - 1) / columns);
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kPanelW * columns) << "\" height=\""
       << num(kPanelH * std::max(rows, 1)) << "\" font-family=\"sans-serif\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

    for (std::size_t k = 0; k < panels.size(); ++k) {
        const Panel& p = panels[k];
        Frame f{kPanelW * (k % columns), kPanelH * (k / columns), kPanelW - kLeft - kRight,
                kPanelH - kTop - kBottom, {}, {}};
        f.yr.add(0);
        for (const auto& s : p.series) {
            for (double y : s.y) f.yr.add(y);
            for (double x : s.x) {
                f.xr.add(x);
                if (kind == PanelKind::histogram) f.xr.add(x + p.bar_width);
            }
        }
        if (kind == PanelKind::bars) {
            f.xr.lo = 0;
            f.xr.hi = static_cast<double>(std::max<std::size_t>(categories.size(), 1));
        }
        f.xr.settle();
        f.yr.hi *= 1.05;
        f.yr.settle();
        axes(os, f, p, kind != PanelKind::bars);

        const std::size_t groups = std::max<std::size_t>(p.series.size(), 1);
        for (std::size_t s = 0; s < p.series.size(); ++s) {
            const auto& ser = p.series[s];
            const auto& color = ser.color.empty() ? palette(s) : ser.color;
            const std::size_t n = std::min(ser.x.size(), ser.y.size());
            if (kind == PanelKind::histogram) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (ser.y[i] == 0) continue;
                    const double x0 = f.px(ser.x[i]), x1 = f.px(ser.x[i] + p.bar_width);
                    os << "<rect x=\"" << num(x0) << "\" y=\"" << num(f.py(ser.y[i])) << "\" width=\""
                       << num(std::max(x1 - x0, 0.5)) << "\" height=\"" << num(f.py(0) - f.py(ser.y[i]))
                       << "\" fill=\"" << color << "\" fill-opacity=\"0.45\"/>\n";
                }
            } else if (kind == PanelKind::line) {
                os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
                for (std::size_t i = 0; i < n; ++i) os << num(f.px(ser.x[i])) << ',' << num(f.py(ser.y[i])) << ' ';
                os << "\"/>\n";
            } else {
                const double slot = 0.8 / static_cast<double>(groups);
                for (std::size_t i = 0; i < n; ++i) {
                    const double x0 = f.px(ser.x[i] + 0.1 + slot * s), x1 = f.px(ser.x[i] + 0.1 + slot * (s + 1));
                    os << "<rect x=\"" << num(x0) << "\" y=\"" << num(f.py(ser.y[i])) << "\" width=\""
                       << num(x1 - x0) << "\" height=\"" << num(f.py(0) - f.py(ser.y[i])) << "\" fill=\""
                       << color << "\" fill-opacity=\"0.8\"><title>" << tick(ser.y[i]) << "</title></rect>\n";
                }
            }
        }
        if (kind == PanelKind::bars)
            for (std::size_t c = 0; c < categories.size(); ++c)
                os << "<text x=\"" << num(f.px(c + 0.5)) << "\" y=\"" << num(f.py(f.yr.lo) + 12)
                   << "\" text-anchor=\"middle\" font-size=\"9\">" << escape(categories[c]) << "</text>\n";
        legend(os, f, p);
    }
    os << "</svg>\n";
    return os.str();
}

} // namespace expecta::svg
