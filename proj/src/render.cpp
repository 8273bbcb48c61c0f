#include "expecta/render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "expecta/error.hpp"
#include "expecta/rng.hpp"

namespace expecta {

void RenderStyle::validate() const {
    if (stroke_thickness < 1) fail(ErrorKind::specification, "stroke thickness must be >= 1");
    if (jitter_amplitude < 0 || noise_std < 0)
        fail(ErrorKind::specification, "perturbation amplitudes must be non-negative");
    if (!(wobble_wavelength > 0)) fail(ErrorKind::specification, "wobble wavelength must be > 0");
}

void to_json(nlohmann::json& j, const RenderStyle& s) {
    j = nlohmann::json{{"kind", s.kind == StrokeKind::clean ? "clean" : "handdrawn"},
                       {"stroke_thickness", s.stroke_thickness},
                       {"jitter_amplitude", s.jitter_amplitude},
                       {"wobble_wavelength", s.wobble_wavelength},
                       {"noise_std", s.noise_std}};
}

void from_json(const nlohmann::json& j, RenderStyle& s) {
    if (j.contains("kind")) {
        const auto k = j.at("kind").get<std::string>();
        if (k == "clean") s.kind = StrokeKind::clean;
        else if (k == "handdrawn") s.kind = StrokeKind::handdrawn;
        else fail(ErrorKind::config, "unknown render style kind '" + k + "'");
    }
    s.stroke_thickness = j.value("stroke_thickness", s.stroke_thickness);
    s.jitter_amplitude = j.value("jitter_amplitude", s.jitter_amplitude);
    s.wobble_wavelength = j.value("wobble_wavelength", s.wobble_wavelength);
    s.noise_std = j.value("noise_std", s.noise_std);
}

namespace {

struct Raster {
    std::span<std::uint8_t> px;
    Canvas canvas;
    std::uint8_t value;

    void plot(int x, int y) const {
        if (x < 0 || y < 0 || x >= canvas.width || y >= canvas.height) return;
        px[static_cast<std::size_t>(y) * canvas.width + x] = value;
    }
};

void clean_square(const Raster& r, const Annotation& a, int t) {
    for (int y = a.y3; y < a.y5; ++y)
        for (int x = a.y2; x < a.y4; ++x)
            if (x < a.y2 + t || x >= a.y4 - t || y < a.y3 + t || y >= a.y5 - t) r.plot(x, y);
}

// Midpoint circle of radius `rad` spanning [c, c + 2*rad + even] on each axis;
// `even` duplicates the centre row/column so even diameters stay symmetric.
void midpoint_ring(const Raster& r, int cx, int cy, int rad, int even) {
    int x = rad, y = 0, err = 1 - rad;
    while (x >= y) {
        r.plot(cx + x + even, cy + y + even);
        r.plot(cx + y + even, cy + x + even);
        r.plot(cx - x, cy + y + even);
        r.plot(cx - y, cy + x + even);
        r.plot(cx + x + even, cy - y);
        r.plot(cx + y + even, cy - x);
        r.plot(cx - x, cy - y);
        r.plot(cx - y, cy - x);
        ++y;
        if (err < 0) {
            err += 2 * y + 1;
        } else {
            --x;
            err += 2 * (y - x) + 1;
        }
    }
}

void clean_circle(const Raster& r, const Annotation& a, int t) {
    const int s = a.size();
    const int rad = (s - 1) / 2;
    const int even = (s % 2 == 0) ? 1 : 0;
    const int cx = a.y2 + rad;
    const int cy = a.y3 + rad;
    for (int k = 0; k < t && rad - k >= 0; ++k) midpoint_ring(r, cx, cy, rad - k, even);
}

// Closed outline path in pixel-centre coordinates with outward normals,
// sampled every `step` pixels of arc length.
struct Path {
    std::vector<double> x, y, nx, ny, arc;
};

Path outline_path(const Annotation& a, int t, double step) {
    Path p;
    const double h = (t - 1) / 2.0;
    auto push = [&](double x, double y, double nx, double ny, double s) {
        p.x.push_back(x);
        p.y.push_back(y);
        p.nx.push_back(nx);
        p.ny.push_back(ny);
        p.arc.push_back(s);
    };
    if (a.y1 == 1) {
        const double x0 = a.y2 + h, y0 = a.y3 + h;
        const double x1 = a.y4 - 1 - h, y1 = a.y5 - 1 - h;
        const double side = std::max(0.0, x1 - x0);
        const int n = std::max(1, static_cast<int>(std::ceil(side / step)));
        double s = 0.0;
        for (int i = 0; i < n; ++i, s += side / n) push(x0 + side * i / n, y0, 0, -1, s);
        for (int i = 0; i < n; ++i, s += side / n) push(x1, y0 + side * i / n, 1, 0, s);
        for (int i = 0; i < n; ++i, s += side / n) push(x1 - side * i / n, y1, 0, 1, s);
        for (int i = 0; i < n; ++i, s += side / n) push(x0, y1 - side * i / n, -1, 0, s);
        push(x0, y0, 0, -1, s);
    } else {
        const double cx = (a.y2 + a.y4 - 1) / 2.0;
        const double cy = (a.y3 + a.y5 - 1) / 2.0;
        const double rad = std::max(0.0, (a.size() - 1) / 2.0 - h);
        const double circ = 2 * std::numbers::pi * rad;
        const int n = std::max(8, static_cast<int>(std::ceil(circ / step)));
        for (int i = 0; i <= n; ++i) {
            const double th = 2 * std::numbers::pi * i / n;
            push(cx + rad * std::cos(th), cy + rad * std::sin(th), std::cos(th), std::sin(th),
                 circ * i / n);
        }
    }
    return p;
}

void stamp(const Raster& r, double x, double y, int t) {
    const double h = (t - 1) / 2.0;
    const int x0 = static_cast<int>(std::floor(x - h + 0.5));
    const int y0 = static_cast<int>(std::floor(y - h + 0.5));
    for (int dy = 0; dy < t; ++dy)
        for (int dx = 0; dx < t; ++dx) r.plot(x0 + dx, y0 + dy);
}

void handdrawn_outline(const Raster& r, const Annotation& a, const RenderStyle& style, Rng& rng) {
    const int t = style.stroke_thickness;
    const double amp = style.jitter_amplitude;
    const double lambda = style.wobble_wavelength;
    Path p = outline_path(a, t, 0.5);

    const double ph1 = rng.uniform(0, 2 * std::numbers::pi);
    const double ph2 = rng.uniform(0, 2 * std::numbers::pi);
    // Per-vertex jitter on knots every half wavelength, linearly interpolated.
    const double knot = lambda / 2;
    const double total = p.arc.back();
    std::vector<double> knots(static_cast<std::size_t>(std::ceil(total / knot)) + 2);
    for (auto& k : knots) k = rng.uniform(-0.3, 0.3) * amp;

    auto offset = [&](double s) {
        const double w = 0.6 * std::sin(2 * std::numbers::pi * s / lambda + ph1) +
                         0.4 * std::sin(2 * std::numbers::pi * s / (1.7 * lambda) + ph2);
        const double u = s / knot;
        const auto i = static_cast<std::size_t>(u);
        const double f = u - static_cast<double>(i);
        const double j = knots[i] * (1 - f) + knots[i + 1] * f;
        return std::clamp(amp * w + j, -amp, amp);
    };

    double px = 0, py = 0;
    for (std::size_t i = 0; i < p.x.size(); ++i) {
        const double d = offset(p.arc[i]);
        const double x = p.x[i] + d * p.nx[i];
        const double y = p.y[i] + d * p.ny[i];
        if (i > 0) {
            // fill gaps between consecutive displaced vertices
            const double len = std::hypot(x - px, y - py);
            const int n = static_cast<int>(std::ceil(len / 0.5));
            for (int k = 1; k < n; ++k) stamp(r, px + (x - px) * k / n, py + (y - py) * k / n, t);
        }
        stamp(r, x, y, t);
        px = x;
        py = y;
    }
}

} // namespace

void render_into(const Annotation& ann, const RenderStyle& style, std::uint64_t seed,
                 Canvas canvas, std::span<std::uint8_t> out) {
    if (!ann.valid_for(canvas))
        fail(ErrorKind::render_domain, "annotation " + to_string(ann) + " is not valid for a " +
                                           std::to_string(canvas.width) + "x" +
                                           std::to_string(canvas.height) + " canvas");
    if (out.size() != canvas.pixels())
        fail(ErrorKind::dimension, "render buffer does not match canvas size");
    std::fill(out.begin(), out.end(), std::uint8_t{0});
    const Raster r{out, canvas, static_cast<std::uint8_t>(ann.y6)};
    const int t = style.stroke_thickness;

    Rng rng(seed);
    if (style.kind == StrokeKind::handdrawn && style.jitter_amplitude > 0) {
        handdrawn_outline(r, ann, style, rng);
    } else if (ann.y1 == 1) {
        clean_square(r, ann, t);
    } else {
        clean_circle(r, ann, t);
    }

    if (style.kind == StrokeKind::handdrawn && style.noise_std > 0) {
        for (auto& v : out) {
            if (v == 0) continue;
            const double n = std::round(ann.y6 + rng.normal(0.0, style.noise_std));
            v = static_cast<std::uint8_t>(std::clamp(n, 1.0, 255.0));
        }
    }
}

GrayImage render(const Annotation& ann, const RenderStyle& style, std::uint64_t seed,
                 Canvas canvas) {
    GrayImage img(canvas.width, canvas.height);
    render_into(ann, style, seed, canvas, img.pixels);
    return img;
}

Annotation auto_label(ImageView img, int cls) {
    int x0 = img.width, y0 = img.height, x1 = -1, y1 = -1;
    std::uint64_t sum = 0, count = 0;
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const auto v = img.at(x, y);
            if (v == 0) continue;
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
            sum += v;
            ++count;
        }
    }
    if (count == 0) fail(ErrorKind::no_foreground, "image has no nonzero pixels");

    // half-open extent, then square up by growing the shorter side symmetrically
    int lo[2] = {x0, y0};
    int hi[2] = {x1 + 1, y1 + 1};
    const int limit[2] = {img.width, img.height};
    const int side = std::min(std::max(hi[0] - lo[0], hi[1] - lo[1]), std::min(img.width, img.height));
    for (int ax = 0; ax < 2; ++ax) {
        const int deficit = side - (hi[ax] - lo[ax]);
        lo[ax] -= deficit / 2;  // negative deficit shrinks symmetrically
        hi[ax] = lo[ax] + side;
        if (lo[ax] < 0) {
            hi[ax] -= lo[ax];
            lo[ax] = 0;
        }
        if (hi[ax] > limit[ax]) {
            lo[ax] -= hi[ax] - limit[ax];
            hi[ax] = limit[ax];
        }
    }

    Annotation a;
    a.y1 = cls;
    a.y2 = lo[0];
    a.y3 = lo[1];
    a.y4 = hi[0];
    a.y5 = hi[1];
    a.y6 = static_cast<int>((2 * sum + count) / (2 * count));
    return a;
}

void draw_polyline(std::span<std::uint8_t> out, Canvas canvas, std::span<const double> xs,
                   std::span<const double> ys, int thickness, std::uint8_t value) {
    const Raster r{out, canvas, value};
    const std::size_t n = std::min(xs.size(), ys.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (i > 0) {
            const double len = std::hypot(xs[i] - xs[i - 1], ys[i] - ys[i - 1]);
            const int steps = static_cast<int>(std::ceil(len / 0.5));
            for (int k = 1; k < steps; ++k)
                stamp(r, xs[i - 1] + (xs[i] - xs[i - 1]) * k / steps,
                      ys[i - 1] + (ys[i] - ys[i - 1]) * k / steps, thickness);
        }
        stamp(r, xs[i], ys[i], thickness);
    }
}

void write_pgm(const GrayImage& img, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorKind::format, "cannot open " + path.string() + " for writing");
    os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()),
             static_cast<std::streamsize>(img.pixels.size()));
}

GrayImage read_pgm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    if (!(is >> magic >> w >> h >> maxval) || magic != "P5" || maxval != 255 || w <= 0 || h <= 0)
        fail(ErrorKind::format, path.string() + ": not an 8-bit binary PGM");
    is.get();
    GrayImage img(w, h);
    is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (is.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        fail(ErrorKind::format, path.string() + ": truncated pixel data");
    return img;
}

std::string contact_sheet_svg(std::span<const GrayImage> images, int columns, int scale) {
    if (images.empty() || columns <= 0) return "<svg xmlns=\"http://www.w3.org/2000/svg\"/>\n";
    const int w = images.front().width, h = images.front().height, gap = 2;
    const int rows = static_cast<int>((images.size() + columns - 1) / columns);
    const int width = columns * (w * scale + gap) + gap;
    const int height = rows * (h * scale + gap) + gap;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" shape-rendering=\"crispEdges\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"#808080\"/>\n";
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& img = images[i];
        const int ox = gap + static_cast<int>(i % columns) * (w * scale + gap);
        const int oy = gap + static_cast<int>(i / columns) * (h * scale + gap);
        os << "<g transform=\"translate(" << ox << ',' << oy << ")\">"
           << "<rect width=\"" << img.width * scale << "\" height=\"" << img.height * scale
           << "\" fill=\"#000\"/>";
        for (int y = 0; y < img.height; ++y) {
            int x = 0;
            while (x < img.width) {
                const auto v = img.at(x, y);
                int run = 1;
                while (x + run < img.width && img.at(x + run, y) == v) ++run;
                if (v != 0)
                    os << "<rect x=\"" << x * scale << "\" y=\"" << y * scale << "\" width=\""
                       << run * scale << "\" height=\"" << scale << "\" fill=\"rgb(" << int(v)
                       << ',' << int(v) << ',' << int(v) << ")\"/>";
                x += run;
            }
        }
        os << "</g>\n";
    }
    os << "</svg>\n";
    return os.str();
}

} // namespace expecta
