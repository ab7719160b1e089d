#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "lcmae/augment.hpp"

namespace lcmae {

/// In-memory image set. Pixels are decoded to [0, 1]; on disk they are u8.
struct Dataset {
    std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;
    bool has_labels = false;
    std::vector<Image> images;
    std::vector<std::uint16_t> labels;

    std::size_t size() const { return images.size(); }
    std::vector<const Image*> pointers() const;
    std::vector<const Image*> pointers(const std::vector<std::size_t>& indices) const;
};

/// "LCIMG1" header, u32 count/height/width/channels, u8 label flag, then per
/// record HWC u8 pixels followed by a little-endian u16 label when labelled.
/// Pixels are quantized as round(255 * clamp(x, 0, 1)).
std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

struct SyntheticSpec {
    std::size_t count = 4096;
    std::size_t size = 32;
    std::size_t classes = 8;
};

/// Shape-category images: class c draws shape c % 8 (disk, square, triangle,
/// ring, cross, bars, diamond, X) at a random position and scale over a
/// randomly oriented sinusoidal texture; class c > 7 also shifts the palette.
/// Labels cycle i % classes, so divisible counts are exactly balanced.
Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

}  // namespace lcmae
