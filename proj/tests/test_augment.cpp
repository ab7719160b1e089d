#include <doctest.h>

#include <cmath>

#include "lcmae/augment.hpp"
#include "lcmae/errors.hpp"

using namespace lcmae;

namespace {

Image random_image(Rng& rng, std::size_t h, std::size_t w) {
    Image img = Image::blank(3, h, w);
    for (auto& p : img.pixels) p = rng.uniform();
    return img;
}

bool in_unit_range(const Image& img) {
    for (double p : img.pixels) {
        if (!(p >= 0.0 && p <= 1.0)) return false;
    }
    return true;
}

AugmentConfig identity_photometric() {
    AugmentConfig c;
    c.brightness = c.contrast = c.saturation = 0.0;
    c.three_augment = true;
    c.blur_sigma_low = c.blur_sigma_high = 0.0;
    c.solarize_threshold = 1.0;
    return c;
}

}  // namespace

TEST_CASE("simple resized crop") {
    Rng rng(1);
    Image img = random_image(rng, 36, 36);  // 36 = 32 * 9 / 8, no resize
    CropRecord rec;
    Rng r1(5);
    Image out = simple_resized_crop(img, 32, r1, &rec);
    CHECK(out.height == 32);
    CHECK(out.width == 32);
    CHECK(rec.height == 32.0);
    CHECK(rec.width == 32.0);
    CHECK_FALSE(rec.scale_sampled);
    const auto top = static_cast<std::size_t>(rec.top), left = static_cast<std::size_t>(rec.left);
    CHECK(rec.top == static_cast<double>(top));
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < 32; ++y) {
            for (std::size_t x = 0; x < 32; ++x) CHECK(out.at(c, y, x) == doctest::Approx(img.at(c, y + top, x + left)).epsilon(1e-12));
        }
    }

    Image flat = Image::blank(3, 20, 50, 0.3);
    Rng r2(6);
    for (double p : simple_resized_crop(flat, 32, r2).pixels) CHECK(p == doctest::Approx(0.3).epsilon(1e-12));

    CropRecord a, b;
    Rng s1(9), s2(9);
    simple_resized_crop(img, 32, s1, &a);
    simple_resized_crop(img, 32, s2, &b);
    CHECK(a.top == b.top);
    CHECK(a.left == b.left);

    Rng r3(1);
    CHECK_THROWS_AS(simple_resized_crop(Image::blank(3, 0, 4), 32, r3), InputError);
}

TEST_CASE("random resized crop") {
    Rng rng(2);
    Image img = random_image(rng, 32, 32);
    CropRecord rec;
    Rng r1(3);
    random_resized_crop(img, 1.0, 1.0, 32, r1, &rec);
    CHECK(rec.top == 0.0);
    CHECK(rec.left == 0.0);
    CHECK(rec.height == 32.0);
    CHECK(rec.width == 32.0);

    Image wide = random_image(rng, 20, 60);
    for (int i = 0; i < 20; ++i) {
        Rng r(static_cast<std::uint64_t>(i));
        CropRecord c;
        Image out = random_resized_crop(wide, 0.2, 1.0, 24, r, &c);
        CHECK(out.height == 24);
        CHECK(out.width == 24);
        CHECK(c.scale_sampled);
        CHECK(in_unit_range(out));
    }
    CropRecord a, b;
    Rng s1(4), s2(4);
    random_resized_crop(wide, 0.2, 1.0, 24, s1, &a);
    random_resized_crop(wide, 0.2, 1.0, 24, s2, &b);
    CHECK(a.top == b.top);
    CHECK(a.height == b.height);
    Rng r4(1);
    CHECK_THROWS_AS(random_resized_crop(wide, 0.0, 1.0, 24, r4), ConfigError);
}

TEST_CASE("photometric ops") {
    Image px = Image::blank(3, 1, 1, 0.8);
    CHECK(solarize(px, 0.5).pixels[0] == doctest::Approx(0.2).epsilon(1e-15));
    Image low = Image::blank(3, 1, 1, 0.3);
    CHECK(solarize(low, 0.5).pixels[0] == 0.3);

    Rng rng(3);
    Image img = random_image(rng, 8, 8);
    Image g = grayscale(img);
    for (std::size_t y = 0; y < 8; ++y) {
        for (std::size_t x = 0; x < 8; ++x) {
            CHECK(g.at(0, y, x) == g.at(1, y, x));
            CHECK(g.at(1, y, x) == g.at(2, y, x));
        }
    }
    CHECK(gaussian_blur(img, 0.0).pixels == img.pixels);

    // Zero jitter with the three-augment choice off is the identity; with it
    // on, a zero-sigma blur pick is still the identity.
    AugmentConfig id = identity_photometric();
    id.three_augment = false;
    for (int i = 0; i < 10; ++i) {
        Rng r(static_cast<std::uint64_t>(i));
        CHECK(photometric(img, id, r).pixels == img.pixels);
    }
    id.three_augment = true;
    int blurs = 0;
    for (int i = 0; i < 30; ++i) {
        Rng r(static_cast<std::uint64_t>(i));
        PhotometricRecord rec;
        Image out = photometric(img, id, r, &rec);
        if (rec.op != "blur") continue;
        ++blurs;
        CHECK(out.pixels == img.pixels);
    }
    CHECK(blurs > 0);
    Image twice = hflip(hflip(img));
    CHECK(twice.pixels == img.pixels);
}

TEST_CASE("photometric output stays in range") {
    Rng rng(4);
    AugmentConfig c;
    c.brightness = 0.9;
    c.contrast = 0.9;
    c.saturation = 0.9;
    for (int i = 0; i < 30; ++i) {
        Image img = random_image(rng, 8, 8);
        Rng r(static_cast<std::uint64_t>(100 + i));
        Image out = photometric(img, c, r);
        CHECK(in_unit_range(out));
    }
}

TEST_CASE("view pairs") {
    Rng rng(5);
    Image img = random_image(rng, 40, 40);
    AugmentConfig c;
    const ViewPair p = make_view_pair(img, c, Rng(7));
    CHECK(p.crop.top == p.target_crop.top);
    CHECK(p.crop.left == p.target_crop.left);
    CHECK(p.crop.flipped == p.target_crop.flipped);
    CHECK_FALSE(p.crop.scale_sampled);
    CHECK(in_unit_range(p.target));
    CHECK(online_view(img, c, Rng(7)).pixels == p.online.pixels);

    c.photometric = false;
    const ViewPair q = make_view_pair(img, c, Rng(7));
    CHECK(q.online.pixels == q.target.pixels);

    c = AugmentConfig{};
    const ViewPair r1 = make_view_pair(img, c, Rng(8));
    const ViewPair r2 = make_view_pair(img, c, Rng(8));
    CHECK(r1.target.pixels == r2.target.pixels);
    CHECK(r1.online.pixels == r2.online.pixels);

    c.crop_mode = CropMode::rrc;
    CHECK(make_view_pair(img, c, Rng(9)).crop.scale_sampled);
}

TEST_CASE("crop mode parsing") {
    CHECK(parse_crop_mode("src") == CropMode::src);
    CHECK(parse_crop_mode("rrc") == CropMode::rrc);
    CHECK(to_string(CropMode::rrc) == "rrc");
    CHECK_THROWS_AS(parse_crop_mode("foo"), ConfigError);
}
