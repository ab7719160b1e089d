#include <doctest.h>

#include <cmath>

#include "lcmae/analysis.hpp"
#include "lcmae/dataset.hpp"
#include "lcmae/errors.hpp"
#include "test_util.hpp"

using namespace lcmae;
using testutil::randn;
using testutil::to_vec;

namespace {

double map_sum(const std::vector<double>& m) {
    double s = 0.0;
    for (double v : m) s += v;
    return s;
}

// Largest relative deviation, scaled by the leading singular value so that
// numerically zero tail values compare on an absolute footing.
double spectrum_err(const std::vector<double>& a, const std::vector<double>& b) {
    const double scale = std::max({a.empty() ? 0.0 : a[0], b.empty() ? 0.0 : b[0], 1e-300});
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    return worst;
}

}  // namespace

TEST_CASE("attention maps") {
    Rng rng(1);
    ViTConfig c;
    const Encoder enc = Encoder::create(c, rng);
    const Dataset data = generate_synthetic({1, 32, 2}, 2);
    const auto r = attention_maps(enc, data.images[0], 10, c.depth - 1);
    CHECK(r.grid_h == 8);
    CHECK(r.grid_w == 8);
    REQUIRE(r.maps.size() == c.heads);
    for (const auto& m : r.maps) {
        CHECK(m.size() == 64);
        CHECK(std::abs(map_sum(m) - 1.0) < 1e-6);
        for (double v : m) CHECK(v >= 0.0);
    }
    CHECK_THROWS_AS(attention_maps(enc, data.images[0], 64, 0), IndexError);
    CHECK_THROWS_AS(attention_maps(enc, data.images[0], 0, c.depth), IndexError);

    ViTConfig one;
    one.image_size = 4;
    one.patch_size = 2;
    one.dim = 8;
    one.depth = 1;
    one.heads = 1;
    Rng r1(3);
    Encoder flat = Encoder::create(one, r1);
    for (auto& v : flat.pos.mutable_data()) v = 0.0;
    const auto u = attention_maps(flat, Image::blank(3, 4, 4, 0.4), 2, 0);
    for (double v : u.maps[0]) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("mean attention distance") {
    std::vector<double> eye(16, 0.0);
    for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    CHECK(mean_attention_distance(Tensor::from_data({1, 1, 4, 4}, eye), 2, 2)[0] == 0.0);

    auto two = mean_attention_distance(Tensor::full({1, 1, 2, 2}, 0.5), 2, 1);
    CHECK(two[0] == doctest::Approx(0.5).epsilon(1e-15));

    // Uniform attention equals the mean pairwise grid distance.
    const std::size_t g = 3, q = 9;
    double pair = 0.0;
    for (std::size_t a = 0; a < q; ++a) {
        for (std::size_t b = 0; b < q; ++b) pair += std::hypot(double(a / g) - double(b / g), double(a % g) - double(b % g));
    }
    pair /= static_cast<double>(q * q);
    auto uni = mean_attention_distance(Tensor::full({2, 3, q, q}, 1.0 / q), g, g);
    CHECK(uni.size() == 3);
    for (double d : uni) CHECK(d == doctest::Approx(pair).epsilon(1e-12));

    // Attending a fixed offset costs the same wherever the query sits.
    std::vector<double> shift(q * q, 0.0);
    for (std::size_t a = 0; a < q; ++a) {
        const std::size_t y = a / g, x = a % g;
        const std::size_t k = y * g + (x + 1 < g ? x + 1 : x - 1);
        shift[a * q + k] = 1.0;
    }
    CHECK(mean_attention_distance(Tensor::from_data({1, 1, q, q}, shift), g, g)[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(mean_attention_distance(Tensor::full({1, 1, 4, 4}, 0.25), 3, 3), DimensionError);
}

TEST_CASE("spectrum examples") {
    auto s = sv_spectrum(Tensor::from_data({2, 2}, {1, 0, -1, 0})).singular_values;
    REQUIRE(s.size() == 2);
    CHECK(s[0] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-14));
    CHECK(s[1] == 0.0);

    std::vector<double> r1;
    const std::vector<double> dir{1.0, -2.0, 0.5, 3.0};
    for (int i = 0; i < 6; ++i) {
        for (double v : dir) r1.push_back(0.3 * i * v);
    }
    auto rs = sv_spectrum(Tensor::from_data({6, 4}, r1)).singular_values;
    CHECK(rs[0] > 0.1);
    for (std::size_t i = 1; i < rs.size(); ++i) CHECK(rs[i] < 1e-9);

    CHECK_THROWS_AS(sv_spectrum(Tensor::zeros({1, 3})), DegenerateError);
}

TEST_CASE("spectrum matches an eigen oracle") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = randn(rng, {8, 5});
        const auto got = sv_spectrum(x).singular_values;
        const auto want = testutil::oracle_singular_values(to_vec(x), 8, 5);
        CHECK(got.size() == 5);
        CHECK(spectrum_err(got, want) < 1e-8);
        CHECK(std::is_sorted(got.rbegin(), got.rend()));
    }
}

TEST_CASE("spectrum invariances") {
    Rng rng(5);
    const std::size_t n = 10, d = 4;
    Tensor x = randn(rng, {n, d});
    const auto base = sv_spectrum(x).singular_values;

    std::vector<double> shifted = to_vec(x);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) shifted[i * d + j] += 5.0 * static_cast<double>(j + 1);
    }
    CHECK(spectrum_err(sv_spectrum(Tensor::from_data({n, d}, shifted)).singular_values, base) < 1e-9);

    // Rotation in the (0, 2) plane.
    const double c = std::cos(0.7), s = std::sin(0.7);
    std::vector<double> rot = to_vec(x);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = rot[i * d], b = rot[i * d + 2];
        rot[i * d] = c * a - s * b;
        rot[i * d + 2] = s * a + c * b;
    }
    CHECK(spectrum_err(sv_spectrum(Tensor::from_data({n, d}, rot)).singular_values, base) < 1e-9);
}

TEST_CASE("gap curves and layer features") {
    ViTConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.dim = 8;
    c.depth = 2;
    c.heads = 2;
    Rng r1(6);
    const Encoder a = Encoder::create(c, r1);
    const Dataset data = generate_synthetic({12, 8, 2}, 7);
    const auto imgs = data.pointers();

    const auto same = sv_gap_curve(a, a, imgs, 2);
    CHECK(same.size() == 8);
    for (double v : same) CHECK(v == 0.0);

    Rng r2(7);
    const Encoder b = Encoder::create(c, r2);
    CHECK(sv_gap_curve(a, b, imgs, 1).size() == 8);
    CHECK(sv_gap_curve(a, b, data.pointers({0, 1, 2, 3, 4}), 1).size() == 4);

    ViTConfig wide = c;
    wide.dim = 16;
    Rng r3(8);
    const Encoder w = Encoder::create(wide, r3);
    CHECK_THROWS_AS(sv_gap_curve(a, w, imgs, 1), ContractError);

    const auto gap = sv_gap_values({2.0, 1e-20}, {1.0, 1.0}, 5, 2);
    CHECK(gap[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(gap[1] == doctest::Approx(std::log(1e-12)).epsilon(1e-15));

    const Tensor f = layer_features(a, imgs, 1);
    CHECK(f.shape() == Shape{12, 8});
    CHECK(to_vec(layer_features(a, imgs, 1)) == to_vec(f));
    CHECK(layer_features(a, data.pointers({3}), 0).shape() == Shape{1, 8});
    // Batching does not change the features.
    CHECK(to_vec(pooled_features(a, imgs, 1, 5)) == to_vec(f));
    CHECK_THROWS_AS(layer_features(a, imgs, 3), IndexError);
}
