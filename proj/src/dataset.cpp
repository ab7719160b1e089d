#include "lcmae/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

#include "lcmae/errors.hpp"
#include "lcmae/rng.hpp"

namespace lcmae {

namespace {

constexpr char kMagic[6] = {'L', 'C', 'I', 'M', 'G', '1'};
constexpr std::size_t kHeaderSize = 6 + 4 * 4 + 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint8_t quantize(double x) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0))); }

double luma(const double* rgb) { return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]; }

// Shape membership in rotated local coordinates scaled by the shape radius.
bool inside(std::size_t shape, double u, double v) {
    const double au = std::abs(u), av = std::abs(v);
    switch (shape) {
        case 0: return u * u + v * v <= 1.0;
        case 1: return std::max(au, av) <= 0.8;
        case 2: return v >= -0.8 && v <= 0.7 && au <= (v + 0.8) * 0.65;
        case 3: {
            const double r = std::sqrt(u * u + v * v);
            return r >= 0.55 && r <= 1.0;
        }
        case 4: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
        case 5: return au <= 0.9 && av <= 0.9 && static_cast<int>(std::floor((v + 0.9) / 0.36)) % 2 == 0;
        case 6: return au + av <= 1.0;
        default: return std::max(au, av) <= 0.9 && (std::abs(u - v) <= 0.35 || std::abs(u + v) <= 0.35);
    }
}

}  // namespace

std::vector<const Image*> Dataset::pointers() const {
    std::vector<const Image*> out;
    for (const auto& im : images) out.push_back(&im);
    return out;
}

std::vector<const Image*> Dataset::pointers(const std::vector<std::size_t>& indices) const {
    std::vector<const Image*> out;
    for (auto i : indices) out.push_back(&images.at(i));
    return out;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
    std::vector<std::uint8_t> out(kMagic, kMagic + 6);
    put_u32(out, static_cast<std::uint32_t>(data.size()));
    put_u32(out, static_cast<std::uint32_t>(data.height));
    put_u32(out, static_cast<std::uint32_t>(data.width));
    put_u32(out, static_cast<std::uint32_t>(data.channels));
    out.push_back(data.has_labels ? 1 : 0);
    if (data.has_labels && data.labels.size() != data.size()) throw ContractError("dataset: label count mismatch");
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Image& im = data.images[i];
        if (im.channels != data.channels || im.height != data.height || im.width != data.width) {
            throw ContractError("dataset: image " + std::to_string(i) + " does not match the header extents");
        }
        for (std::size_t y = 0; y < im.height; ++y) {
            for (std::size_t x = 0; x < im.width; ++x) {
                for (std::size_t c = 0; c < im.channels; ++c) out.push_back(quantize(im.at(c, y, x)));
            }
        }
        if (data.has_labels) {
            out.push_back(static_cast<std::uint8_t>(data.labels[i] & 0xff));
            out.push_back(static_cast<std::uint8_t>(data.labels[i] >> 8));
        }
    }
    return out;
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < kHeaderSize || std::memcmp(bytes.data(), kMagic, 6) != 0) {
        throw ParseError("dataset: missing LCIMG1 header");
    }
    Dataset data;
    const std::size_t count = get_u32(bytes.data() + 6);
    data.height = get_u32(bytes.data() + 10);
    data.width = get_u32(bytes.data() + 14);
    data.channels = get_u32(bytes.data() + 18);
    const std::uint8_t flag = bytes[22];
    if (flag > 1) throw ParseError("dataset: label flag must be 0 or 1, got " + std::to_string(flag));
    data.has_labels = flag == 1;
    const std::size_t pixels = data.height * data.width * data.channels;
    const std::size_t record = pixels + (data.has_labels ? 2 : 0);
    if (bytes.size() != kHeaderSize + count * record) {
        throw ParseError("dataset: expected " + std::to_string(kHeaderSize + count * record) + " bytes for " +
                         std::to_string(count) + " records, found " + std::to_string(bytes.size()));
    }
    const std::uint8_t* p = bytes.data() + kHeaderSize;
    for (std::size_t i = 0; i < count; ++i) {
        Image im = Image::blank(data.channels, data.height, data.width);
        for (std::size_t y = 0; y < data.height; ++y) {
            for (std::size_t x = 0; x < data.width; ++x) {
                for (std::size_t c = 0; c < data.channels; ++c) im.at(c, y, x) = static_cast<double>(*p++) / 255.0;
            }
        }
        data.images.push_back(std::move(im));
        if (data.has_labels) {
            data.labels.push_back(static_cast<std::uint16_t>(p[0] | (p[1] << 8)));
            p += 2;
        }
    }
    return data;
}

void save_dataset(const Dataset& data, const std::string& path) {
    const auto bytes = encode_dataset(data);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + path + "' failed");
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset '" + path + "'");
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_dataset(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what());
    }
}

Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.classes == 0 && spec.count > 0) throw ConfigError("synthetic: classes must be positive");
    if (spec.size == 0) throw ConfigError("synthetic: image size must be positive");
    if (spec.classes > 65536) throw ConfigError("synthetic: labels are 16-bit");
    Dataset data;
    data.channels = 3;
    data.height = data.width = spec.size;
    data.has_labels = true;
    const Rng root(seed);
    const double s = static_cast<double>(spec.size);
    for (std::size_t i = 0; i < spec.count; ++i) {
        const std::size_t label = i % spec.classes;
        const std::size_t shape = label % 8;
        Rng rng = root.fork(i);

        double bg[3], fg[3];
        for (double& c : bg) c = rng.uniform(0.2, 0.8);
        do {
            for (double& c : fg) c = rng.uniform(0.0, 1.0);
            if ((label / 8) % 2 == 1) fg[0] = std::max(fg[0], 0.8);
        } while (std::abs(luma(fg) - luma(bg)) < 0.3);

        const double freq = rng.uniform(0.3, 1.2);
        const double theta = rng.uniform(0.0, std::numbers::pi);
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double amp = rng.uniform(0.05, 0.2);
        const double radius = rng.uniform(0.22, 0.35) * s;
        const double cx = rng.uniform(0.35, 0.65) * s;
        const double cy = rng.uniform(0.35, 0.65) * s;
        const double rot = rng.uniform(-0.3, 0.3);
        const double cr = std::cos(rot), sr = std::sin(rot);
        const double ct = std::cos(theta), st = std::sin(theta);

        Image im = Image::blank(3, spec.size, spec.size);
        for (std::size_t y = 0; y < spec.size; ++y) {
            for (std::size_t x = 0; x < spec.size; ++x) {
                // 2x2 supersampled coverage for soft edges.
                double cover = 0.0;
                for (int sy = 0; sy < 2; ++sy) {
                    for (int sx = 0; sx < 2; ++sx) {
                        const double px = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
                        const double py = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
                        const double u = (cr * px + sr * py) / radius;
                        const double v = (-sr * px + cr * py) / radius;
                        if (inside(shape, u, v)) cover += 0.25;
                    }
                }
                const double wave = amp * std::sin(freq * (ct * static_cast<double>(x) + st * static_cast<double>(y)) + phase);
                for (std::size_t c = 0; c < 3; ++c) {
                    const double back = bg[c] + wave * (c == 1 ? -1.0 : 1.0);
                    const double value = cover * fg[c] + (1.0 - cover) * back;
                    im.at(c, y, x) = static_cast<double>(quantize(value)) / 255.0;
                }
            }
        }
        data.images.push_back(std::move(im));
        data.labels.push_back(static_cast<std::uint16_t>(label));
    }
    return data;
}

}  // namespace lcmae
