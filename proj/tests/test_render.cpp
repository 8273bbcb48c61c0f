#include <doctest.h>

#include <filesystem>

#include "expecta/annot.hpp"
#include "expecta/error.hpp"
#include "expecta/render.hpp"

using namespace expecta;

TEST_CASE("clean render round trip") {
    const ExpectationSpec spec;
    for (const auto& a : sample_expected(spec, 17, 300)) {
        const auto img = render(a, RenderStyle::clean(), 0, spec.canvas);
        const auto b = auto_label(img, a.y1);
        CHECK(std::abs(b.y2 - a.y2) <= 1);
        CHECK(std::abs(b.y3 - a.y3) <= 1);
        CHECK(std::abs(b.y4 - a.y4) <= 1);
        CHECK(std::abs(b.y5 - a.y5) <= 1);
        REQUIRE(b.y6 == a.y6);
    }
}

TEST_CASE("clean render touches exactly the box extent") {
    const Canvas c{64, 64};
    for (int cls : {0, 1}) {
        const Annotation a{cls, 10, 20, 40, 50, 180};
        const auto img = render(a, RenderStyle::clean(), 0, c);
        int minx = 99, maxx = -1, miny = 99, maxy = -1;
        for (int y = 0; y < c.height; ++y)
            for (int x = 0; x < c.width; ++x)
                if (img.at(x, y)) {
                    CHECK(img.at(x, y) == 180);
                    minx = std::min(minx, x), maxx = std::max(maxx, x);
                    miny = std::min(miny, y), maxy = std::max(maxy, y);
                }
        CHECK(minx == 10);
        CHECK(maxx == 39);
        CHECK(miny == 20);
        CHECK(maxy == 49);
    }
}

TEST_CASE("render determinism and domain") {
    const Canvas c{64, 64};
    const Annotation a{0, 5, 5, 50, 50, 210};
    const auto s = RenderStyle::handdrawn();
    CHECK(render(a, s, 9, c) == render(a, s, 9, c));
    CHECK_FALSE(render(a, s, 9, c) == render(a, s, 10, c));
    // zero perturbation falls back to the clean geometry
    RenderStyle flat = s;
    flat.jitter_amplitude = 0;
    flat.noise_std = 0;
    CHECK(render(a, flat, 3, c) == render(a, RenderStyle::clean(), 0, c));

    CHECK_THROWS_AS(render({0, 10, 10, 10, 10, 100}, RenderStyle::clean(), 0, c), Error);
    CHECK_THROWS_AS(render({0, 10, 10, 70, 70, 100}, RenderStyle::clean(), 0, c), Error);
    CHECK_THROWS_AS(render({1, 10, 10, 20, 21, 100}, RenderStyle::clean(), 0, c), Error);
    try {
        render({0, 0, 0, 5, 5, 0}, RenderStyle::clean(), 0, c);
        FAIL("expected a render-domain error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::render_domain);
    }
}

TEST_CASE("handdrawn strokes stay near the box") {
    const Canvas c{128, 128};
    const auto s = RenderStyle::handdrawn();
    for (const auto& a : sample_expected(ExpectationSpec{}, 4, 100)) {
        const auto img = render(a, s, 1, c);
        const auto b = auto_label(img, a.y1);
        const int slack = static_cast<int>(s.jitter_amplitude) + s.stroke_thickness + 1;
        CHECK(std::abs(b.y2 - a.y2) <= slack);
        CHECK(std::abs(b.y3 - a.y3) <= slack);
        CHECK(std::abs(b.y6 - a.y6) <= 8);
    }
}

TEST_CASE("auto label of an empty image") {
    GrayImage img(16, 16);
    CHECK_THROWS_AS(auto_label(img, 0), Error);
}

TEST_CASE("pgm round trip") {
    const auto img = render({1, 3, 4, 20, 21, 77}, RenderStyle::clean(), 0, {32, 24});
    const auto path = std::filesystem::temp_directory_path() / "expecta_render_test.pgm";
    write_pgm(img, path);
    CHECK(read_pgm(path) == img);
    std::filesystem::remove(path);
    const std::vector<GrayImage> sheet{img, img};
    CHECK(contact_sheet_svg(sheet, 2).find("<svg") != std::string::npos);
}
