#pragma once

// Minimal static SVG charts: histograms, line plots and grouped bars.

#include <string>
#include <vector>

namespace expecta::svg {

struct Series {
    std::string label;
    std::vector<double> x;  // bar left edges for histograms
    std::vector<double> y;
    std::string color;
};

struct Panel {
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<Series> series;
    double bar_width = 1.0;  // histograms only
};

enum class PanelKind { histogram, line, bars };

// Grid of panels sharing one kind; bars use series as groups and x as category index.
std::string figure(const std::vector<Panel>& panels, PanelKind kind, int columns,
                   const std::vector<std::string>& categories = {});

// Fixed palette indexed cyclically.
const std::string& palette(std::size_t i);

} // namespace expecta::svg
