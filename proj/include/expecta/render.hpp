#pragma once

// Parametric simulator: annotation -> grayscale image, and the inverse labeler.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "expecta/annot.hpp"

namespace expecta {

struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels; // row-major

    GrayImage() = default;
    GrayImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, 0) {}

    std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    Canvas canvas() const { return {width, height}; }
    bool operator==(const GrayImage&) const = default;
};

// Non-owning view over one image inside a larger buffer.
struct ImageView {
    int width = 0;
    int height = 0;
    std::span<const std::uint8_t> pixels;

    ImageView() = default;
    ImageView(int w, int h, std::span<const std::uint8_t> px) : width(w), height(h), pixels(px) {}
    ImageView(const GrayImage& img) : width(img.width), height(img.height), pixels(img.pixels) {}

    std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

enum class StrokeKind { clean, handdrawn };

struct RenderStyle {
    StrokeKind kind = StrokeKind::clean;
    int stroke_thickness = 2;
    double jitter_amplitude = 2.0;  // handdrawn only
    double wobble_wavelength = 16.0;
    double noise_std = 4.0;         // handdrawn only

    static RenderStyle clean() { return {}; }
    static RenderStyle handdrawn() {
        RenderStyle s;
        s.kind = StrokeKind::handdrawn;
        return s;
    }

    void validate() const;
    bool operator==(const RenderStyle&) const = default;
};

void to_json(nlohmann::json& j, const RenderStyle& s);
void from_json(const nlohmann::json& j, RenderStyle& s);

// Outline of a circle inscribed in the box (y1 == 0) or of the box itself
// (y1 == 1), stroked at intensity y6 on a black background.
GrayImage render(const Annotation& ann, const RenderStyle& style, std::uint64_t seed,
                 Canvas canvas);

// Writes into an existing buffer of canvas.pixels() bytes (zeroed first).
void render_into(const Annotation& ann, const RenderStyle& style, std::uint64_t seed,
                 Canvas canvas, std::span<std::uint8_t> out);

// Bounding box from the extent of nonzero pixels, squared up; y6 = rounded mean
// of nonzero pixels; y1 = cls.
Annotation auto_label(ImageView img, int cls);

// Rasterizes a polyline with a square brush of the given thickness.
void draw_polyline(std::span<std::uint8_t> out, Canvas canvas, std::span<const double> xs,
                   std::span<const double> ys, int thickness, std::uint8_t value);

void write_pgm(const GrayImage& img, const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);

// Grid of images as an SVG document; each nonzero pixel run becomes a rect.
std::string contact_sheet_svg(std::span<const GrayImage> images, int columns, int scale = 2);

} // namespace expecta
