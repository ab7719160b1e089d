#include "lcmae/augment.hpp"

#include <algorithm>
#include <cmath>

#include "lcmae/errors.hpp"

namespace lcmae {

namespace {

void check_image(const Image& img, const char* op) {
    if (img.channels == 0 || img.height == 0 || img.width == 0 ||
        img.pixels.size() != img.channels * img.height * img.width) {
        throw InputError(std::string(op) + ": degenerate image " + std::to_string(img.channels) + "x" +
                         std::to_string(img.height) + "x" + std::to_string(img.width));
    }
}

void clamp01(Image& img) {
    for (auto& p : img.pixels) p = std::clamp(p, 0.0, 1.0);
}

// Per-pixel luminance; channel mean for non-RGB images.
std::vector<double> luminance(const Image& img) {
    const std::size_t hw = img.height * img.width;
    std::vector<double> out(hw, 0.0);
    if (img.channels == 3) {
        for (std::size_t i = 0; i < hw; ++i) {
            out[i] = 0.299 * img.pixels[i] + 0.587 * img.pixels[hw + i] + 0.114 * img.pixels[2 * hw + i];
        }
    } else {
        for (std::size_t c = 0; c < img.channels; ++c) {
            for (std::size_t i = 0; i < hw; ++i) out[i] += img.pixels[c * hw + i] / static_cast<double>(img.channels);
        }
    }
    return out;
}

double jitter_factor(double strength, Rng& rng) {
    if (strength <= 0.0) return 1.0;
    return rng.uniform(std::max(0.0, 1.0 - strength), 1.0 + strength);
}

Image geometric(const Image& img, const AugmentConfig& cfg, Rng rng, CropRecord* record) {
    CropRecord rec;
    Image out = cfg.crop_mode == CropMode::src
                    ? simple_resized_crop(img, cfg.out_size, rng, &rec)
                    : random_resized_crop(img, cfg.rrc_scale_low, cfg.rrc_scale_high, cfg.out_size, rng, &rec);
    rec.flipped = rng.bernoulli(cfg.hflip_prob);
    if (rec.flipped) out = hflip(out);
    if (record) *record = rec;
    return out;
}

}  // namespace

Image Image::blank(std::size_t channels, std::size_t height, std::size_t width, double value) {
    return {channels, height, width, std::vector<double>(channels * height * width, value)};
}

std::string to_string(CropMode mode) { return mode == CropMode::src ? "src" : "rrc"; }

CropMode parse_crop_mode(const std::string& text) {
    if (text == "src") return CropMode::src;
    if (text == "rrc") return CropMode::rrc;
    throw ConfigError("unknown crop mode '" + text + "' (expected src or rrc)");
}

void AugmentConfig::validate() const {
    if (out_size == 0) throw ConfigError("augment: out_size must be positive");
    if (!(rrc_scale_low > 0.0 && rrc_scale_low <= rrc_scale_high && rrc_scale_high <= 1.0)) {
        throw ConfigError("augment: rrc scale range must satisfy 0 < low <= high <= 1");
    }
    if (brightness < 0.0 || contrast < 0.0 || saturation < 0.0) {
        throw ConfigError("augment: jitter strengths must be non-negative");
    }
    if (blur_sigma_low < 0.0 || blur_sigma_low > blur_sigma_high) {
        throw ConfigError("augment: blur sigma range must satisfy 0 <= low <= high");
    }
    if (hflip_prob < 0.0 || hflip_prob > 1.0) throw ConfigError("augment: hflip_prob must lie in [0, 1]");
}

Image crop_resize(const Image& img, double top, double left, double height, double width, std::size_t out_h,
                  std::size_t out_w) {
    check_image(img, "crop_resize");
    if (!(height > 0.0 && width > 0.0) || out_h == 0 || out_w == 0) {
        throw InputError("crop_resize: empty crop or output");
    }
    Image out = Image::blank(img.channels, out_h, out_w);
    const double sy = height / static_cast<double>(out_h);
    const double sx = width / static_cast<double>(out_w);
    const double y_max = std::min(top + height - 1.0, static_cast<double>(img.height - 1));
    const double x_max = std::min(left + width - 1.0, static_cast<double>(img.width - 1));
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        const double fy = std::clamp(top + (static_cast<double>(oy) + 0.5) * sy - 0.5, top, std::max(top, y_max));
        const auto y0 = static_cast<std::size_t>(std::floor(fy));
        const std::size_t y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            const double fx =
                std::clamp(left + (static_cast<double>(ox) + 0.5) * sx - 0.5, left, std::max(left, x_max));
            const auto x0 = static_cast<std::size_t>(std::floor(fx));
            const std::size_t x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < img.channels; ++c) {
                const double top_row = img.at(c, y0, x0) + wx * (img.at(c, y0, x1) - img.at(c, y0, x0));
                const double bottom_row = img.at(c, y1, x0) + wx * (img.at(c, y1, x1) - img.at(c, y1, x0));
                out.at(c, oy, ox) = wy == 0.0 ? top_row : top_row + wy * (bottom_row - top_row);
            }
        }
    }
    return out;
}

Image simple_resized_crop(const Image& img, std::size_t size, Rng& rng, CropRecord* record) {
    check_image(img, "simple_resized_crop");
    if (size == 0) throw InputError("simple_resized_crop: output size must be positive");
    const auto target_short = static_cast<std::size_t>(std::lround(static_cast<double>(size) * 9.0 / 8.0));
    const std::size_t short_side = std::min(img.height, img.width);
    const double s = static_cast<double>(target_short) / static_cast<double>(short_side);
    const std::size_t rh = img.height == short_side
                               ? target_short
                               : static_cast<std::size_t>(std::lround(static_cast<double>(img.height) * s));
    const std::size_t rw = img.width == short_side
                               ? target_short
                               : static_cast<std::size_t>(std::lround(static_cast<double>(img.width) * s));
    const Image resized = crop_resize(img, 0.0, 0.0, static_cast<double>(img.height),
                                      static_cast<double>(img.width), rh, rw);
    const std::size_t top = static_cast<std::size_t>(rng.below(rh - size + 1));
    const std::size_t left = static_cast<std::size_t>(rng.below(rw - size + 1));
    Image out = Image::blank(img.channels, size, size);
    for (std::size_t c = 0; c < img.channels; ++c) {
        for (std::size_t y = 0; y < size; ++y) {
            for (std::size_t x = 0; x < size; ++x) out.at(c, y, x) = resized.at(c, top + y, left + x);
        }
    }
    if (record) {
        const double inv_y = static_cast<double>(img.height) / static_cast<double>(rh);
        const double inv_x = static_cast<double>(img.width) / static_cast<double>(rw);
        *record = {static_cast<double>(top) * inv_y, static_cast<double>(left) * inv_x,
                   static_cast<double>(size) * inv_y, static_cast<double>(size) * inv_x, false, false};
    }
    return out;
}

Image random_resized_crop(const Image& img, double scale_low, double scale_high, std::size_t size, Rng& rng,
                          CropRecord* record) {
    check_image(img, "random_resized_crop");
    if (!(scale_low > 0.0 && scale_low <= scale_high && scale_high <= 1.0)) {
        throw ConfigError("random_resized_crop: scale range must satisfy 0 < low <= high <= 1");
    }
    const double H = static_cast<double>(img.height), W = static_cast<double>(img.width);
    const double area = H * W;
    const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target_area = area * rng.uniform(scale_low, scale_high);
        const double aspect = std::exp(rng.uniform(log_lo, log_hi));
        const double w = std::round(std::sqrt(target_area * aspect));
        const double h = std::round(std::sqrt(target_area / aspect));
        if (w > 0.0 && h > 0.0 && w <= W && h <= H) {
            const auto top = static_cast<double>(rng.below(static_cast<std::uint64_t>(H - h) + 1));
            const auto left = static_cast<double>(rng.below(static_cast<std::uint64_t>(W - w) + 1));
            if (record) *record = {top, left, h, w, false, true};
            return crop_resize(img, top, left, h, w, size, size);
        }
    }
    double w = W, h = H;
    if (W / H < 3.0 / 4.0) {
        h = std::round(W / (3.0 / 4.0));
    } else if (W / H > 4.0 / 3.0) {
        w = std::round(H * (4.0 / 3.0));
    }
    const double top = std::floor((H - h) / 2.0), left = std::floor((W - w) / 2.0);
    if (record) *record = {top, left, h, w, false, true};
    return crop_resize(img, top, left, h, w, size, size);
}

Image hflip(const Image& img) {
    Image out = img;
    for (std::size_t c = 0; c < img.channels; ++c) {
        for (std::size_t y = 0; y < img.height; ++y) {
            for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
        }
    }
    return out;
}

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        total += v;
    }
    for (auto& k : kernel) k /= total;
    const auto H = static_cast<std::ptrdiff_t>(img.height), W = static_cast<std::ptrdiff_t>(img.width);
    Image tmp = img, out = img;
    for (std::size_t c = 0; c < img.channels; ++c) {
        for (std::ptrdiff_t y = 0; y < H; ++y) {
            for (std::ptrdiff_t x = 0; x < W; ++x) {
                double s = 0.0;
                for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
                    const auto xx = std::clamp<std::ptrdiff_t>(x + i, 0, W - 1);
                    s += kernel[static_cast<std::size_t>(i + radius)] *
                         img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(xx));
                }
                tmp.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = s;
            }
        }
        for (std::ptrdiff_t y = 0; y < H; ++y) {
            for (std::ptrdiff_t x = 0; x < W; ++x) {
                double s = 0.0;
                for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
                    const auto yy = std::clamp<std::ptrdiff_t>(y + i, 0, H - 1);
                    s += kernel[static_cast<std::size_t>(i + radius)] *
                         tmp.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(x));
                }
                out.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = s;
            }
        }
    }
    clamp01(out);
    return out;
}

Image grayscale(const Image& img) {
    const auto lum = luminance(img);
    Image out = img;
    const std::size_t hw = img.height * img.width;
    for (std::size_t c = 0; c < img.channels; ++c) std::copy(lum.begin(), lum.end(), out.pixels.begin() + c * hw);
    clamp01(out);
    return out;
}

Image solarize(const Image& img, double threshold) {
    Image out = img;
    for (auto& p : out.pixels) {
        if (p >= threshold) p = 1.0 - p;
    }
    return out;
}

Image photometric(const Image& img, const AugmentConfig& cfg, Rng& rng, PhotometricRecord* record) {
    check_image(img, "photometric");
    PhotometricRecord rec;
    Image out = img;
    rec.brightness = jitter_factor(cfg.brightness, rng);
    if (rec.brightness != 1.0) {
        for (auto& p : out.pixels) p *= rec.brightness;
        clamp01(out);
    }
    rec.contrast = jitter_factor(cfg.contrast, rng);
    if (rec.contrast != 1.0) {
        const auto lum = luminance(out);
        double m = 0.0;
        for (double v : lum) m += v;
        m /= static_cast<double>(lum.size());
        for (auto& p : out.pixels) p = rec.contrast * p + (1.0 - rec.contrast) * m;
        clamp01(out);
    }
    rec.saturation = jitter_factor(cfg.saturation, rng);
    if (rec.saturation != 1.0) {
        const auto lum = luminance(out);
        const std::size_t hw = out.height * out.width;
        for (std::size_t c = 0; c < out.channels; ++c) {
            for (std::size_t i = 0; i < hw; ++i) {
                double& p = out.pixels[c * hw + i];
                p = rec.saturation * p + (1.0 - rec.saturation) * lum[i];
            }
        }
        clamp01(out);
    }
    if (cfg.three_augment) {
        switch (rng.below(3)) {
            case 0:
                rec.op = "blur";
                rec.blur_sigma = rng.uniform(cfg.blur_sigma_low, cfg.blur_sigma_high);
                out = gaussian_blur(out, rec.blur_sigma);
                break;
            case 1:
                rec.op = "grayscale";
                out = grayscale(out);
                break;
            default:
                rec.op = "solarize";
                out = solarize(out, cfg.solarize_threshold);
                break;
        }
    }
    if (record) *record = rec;
    return out;
}

Image online_view(const Image& img, const AugmentConfig& cfg, const Rng& rng, CropRecord* record) {
    return geometric(img, cfg, rng.fork(1), record);
}

ViewPair make_view_pair(const Image& img, const AugmentConfig& cfg, const Rng& rng) {
    cfg.validate();
    ViewPair pair;
    pair.online = geometric(img, cfg, rng.fork(1), &pair.crop);
    Image base = pair.online;
    pair.target_crop = pair.crop;
    if (cfg.independent_crops) base = geometric(img, cfg, rng.fork(3), &pair.target_crop);
    if (cfg.photometric) {
        Rng photo = rng.fork(2);
        pair.target = photometric(base, cfg, photo, &pair.photometric);
    } else {
        pair.target = std::move(base);
    }
    return pair;
}

}  // namespace lcmae
