#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lcmae/rng.hpp"

namespace lcmae {

/// Channel-major (CHW) image with values in [0, 1].
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    static Image blank(std::size_t channels, std::size_t height, std::size_t width, double value = 0.0);
    double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
};

enum class CropMode { src, rrc };

std::string to_string(CropMode mode);
CropMode parse_crop_mode(const std::string& text);

struct AugmentConfig {
    CropMode crop_mode = CropMode::src;
    std::size_t out_size = 32;
    double rrc_scale_low = 0.2;
    double rrc_scale_high = 1.0;
    double brightness = 0.4;
    double contrast = 0.4;
    double saturation = 0.2;
    bool three_augment = true;
    double blur_sigma_low = 0.1;
    double blur_sigma_high = 2.0;
    double solarize_threshold = 0.5;
    double hflip_prob = 0.5;
    /// Off: the target view is the undistorted base view.
    bool photometric = true;
    /// On: the target view gets its own crop and flip.
    bool independent_crops = false;

    void validate() const;
};

/// Source rectangle (in source pixel units) that was resampled to the output.
struct CropRecord {
    double top = 0.0;
    double left = 0.0;
    double height = 0.0;
    double width = 0.0;
    bool flipped = false;
    bool scale_sampled = false;  ///< true only for RRC area sampling
};

struct PhotometricRecord {
    double brightness = 1.0;
    double contrast = 1.0;
    double saturation = 1.0;
    std::string op = "none";  ///< blur | grayscale | solarize | none
    double blur_sigma = 0.0;
};

struct ViewPair {
    Image online;
    Image target;
    CropRecord crop;
    CropRecord target_crop;
    PhotometricRecord photometric;
};

/// Bilinear resampling (half-pixel centers) of the source rectangle to
/// out_h x out_w; samples are clamped to the rectangle.
Image crop_resize(const Image& img, double top, double left, double height, double width, std::size_t out_h,
                  std::size_t out_w);

/// Shorter side resized to round(S * 9/8), then a uniformly placed S x S crop.
Image simple_resized_crop(const Image& img, std::size_t size, Rng& rng, CropRecord* record = nullptr);

/// Area fraction from [scale_low, scale_high], log-uniform aspect ratio in
/// [3/4, 4/3]; center crop after 10 failed attempts.
Image random_resized_crop(const Image& img, double scale_low, double scale_high, std::size_t size, Rng& rng,
                          CropRecord* record = nullptr);

Image hflip(const Image& img);
Image gaussian_blur(const Image& img, double sigma);
Image grayscale(const Image& img);
Image solarize(const Image& img, double threshold);

/// Brightness, contrast, saturation jitter in that order, then one of blur,
/// grayscale, solarize picked uniformly when three_augment is on.
Image photometric(const Image& img, const AugmentConfig& cfg, Rng& rng, PhotometricRecord* record = nullptr);

/// Geometry (crop and flip) applied to produce the online view. Uses the
/// stream rng.fork(1), so it matches make_view_pair's online view.
Image online_view(const Image& img, const AugmentConfig& cfg, const Rng& rng, CropRecord* record = nullptr);

ViewPair make_view_pair(const Image& img, const AugmentConfig& cfg, const Rng& rng);

}  // namespace lcmae
