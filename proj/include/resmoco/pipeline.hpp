#ifndef RESMOCO_PIPELINE_HPP
#define RESMOCO_PIPELINE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "resmoco/random.hpp"
#include "resmoco/tensor.hpp"

namespace resmoco::data {

/// H x W x 3 bytes, channel-last.
struct ImageU8 {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;

    [[nodiscard]] std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    friend bool operator==(const ImageU8&, const ImageU8&) = default;
};

enum class DatasetKind { cifar10, cifar100, synthetic };

inline std::string_view to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::cifar10: return "cifar10";
        case DatasetKind::cifar100: return "cifar100";
        case DatasetKind::synthetic: return "synthetic";
    }
    return "?";
}

/// Per-channel statistics in [0,1] pixel units.
struct Normalization {
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> std{0.25, 0.25, 0.25};
};

// Channel std is floored so normalized byte inputs stay within +-5.
inline constexpr double min_channel_std = 0.2;

struct Split {
    std::vector<ImageU8> images;
    std::vector<int> labels;

    [[nodiscard]] std::size_t size() const { return images.size(); }
};

struct DatasetHandle {
    DatasetKind kind = DatasetKind::synthetic;
    int class_count = 0;
    Split train;
    Split test;
    Normalization norm;  // from the train split

    [[nodiscard]] std::uint64_t fingerprint() const {
        std::uint64_t h = fnv1a(&class_count, sizeof(class_count));
        for (const Split* s : {&train, &test}) {
            for (const auto& img : s->images) h = fnv1a(img.pixels.data(), img.pixels.size(), h);
            h = fnv1a(s->labels.data(), s->labels.size() * sizeof(int), h);
        }
        return h;
    }
};

inline Normalization compute_normalization(const Split& split) {
    Normalization n;
    std::array<double, 3> sum{}, sq{};
    double count = 0;
    for (const auto& img : split.images) {
        for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = img.pixels[i + c] / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        count += static_cast<double>(img.height * img.width);
    }
    if (count == 0) return n;
    for (std::size_t c = 0; c < 3; ++c) {
        n.mean[c] = sum[c] / count;
        n.std[c] = std::max(std::sqrt(std::max(sq[c] / count - n.mean[c] * n.mean[c], 0.0)), min_channel_std);
    }
    return n;
}

inline void validate_labels(const Split& split, int class_count) {
    for (std::size_t i = 0; i < split.labels.size(); ++i) {
        require(split.labels[i] >= 0 && split.labels[i] < class_count, ErrorKind::label_out_of_range,
                "label " + std::to_string(split.labels[i]) + " at record " + std::to_string(i) + " outside [0," +
                    std::to_string(class_count) + ")");
    }
}

// ---------------------------------------------------------------------------
// CIFAR binaries

inline constexpr std::size_t cifar_pixels = 3 * 32 * 32;
inline constexpr std::size_t cifar10_record = 1 + cifar_pixels;
inline constexpr std::size_t cifar100_record = 2 + cifar_pixels;

/// Decodes planar-RGB CIFAR records. `label_offset` selects which label byte is used.
inline Split parse_cifar_records(std::span<const std::uint8_t> bytes, std::size_t label_bytes, std::size_t label_offset,
                                 int class_count, const std::string& source) {
    const std::size_t record = label_bytes + cifar_pixels;
    require(!bytes.empty() && bytes.size() % record == 0, ErrorKind::truncated_record,
            source + ": " + std::to_string(bytes.size()) + " bytes is not a multiple of the " + std::to_string(record) +
                "-byte record");
    Split out;
    const std::size_t n = bytes.size() / record;
    out.images.reserve(n);
    out.labels.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto* rec = bytes.data() + r * record;
        const int label = rec[label_offset];
        require(label < class_count, ErrorKind::label_out_of_range,
                source + ": label " + std::to_string(label) + " in record " + std::to_string(r) + " exceeds " +
                    std::to_string(class_count - 1));
        ImageU8 img{32, 32, std::vector<std::uint8_t>(cifar_pixels)};
        const auto* px = rec + label_bytes;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < 1024; ++i) img.pixels[i * 3 + c] = px[c * 1024 + i];
        out.images.push_back(std::move(img));
        out.labels.push_back(label);
    }
    return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path, ErrorKind missing) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), missing, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void append_split(Split& into, Split&& from) {
    std::move(from.images.begin(), from.images.end(), std::back_inserter(into.images));
    into.labels.insert(into.labels.end(), from.labels.begin(), from.labels.end());
}

inline DatasetHandle load_cifar10(const std::filesystem::path& dir) {
    require(std::filesystem::is_directory(dir), ErrorKind::dataset_not_found, "dataset directory " + dir.string() + " not found");
    DatasetHandle ds;
    ds.kind = DatasetKind::cifar10;
    ds.class_count = 10;
    for (int b = 1; b <= 5; ++b) {
        const auto path = dir / ("data_batch_" + std::to_string(b) + ".bin");
        const auto bytes = read_file(path, ErrorKind::dataset_not_found);
        append_split(ds.train, parse_cifar_records(bytes, 1, 0, 10, path.filename().string()));
    }
    const auto test_path = dir / "test_batch.bin";
    ds.test = parse_cifar_records(read_file(test_path, ErrorKind::dataset_not_found), 1, 0, 10, "test_batch.bin");
    ds.norm = compute_normalization(ds.train);
    return ds;
}

/// Fine labels are used; the coarse byte is skipped.
inline DatasetHandle load_cifar100(const std::filesystem::path& dir) {
    require(std::filesystem::is_directory(dir), ErrorKind::dataset_not_found, "dataset directory " + dir.string() + " not found");
    DatasetHandle ds;
    ds.kind = DatasetKind::cifar100;
    ds.class_count = 100;
    ds.train = parse_cifar_records(read_file(dir / "train.bin", ErrorKind::dataset_not_found), 2, 1, 100, "train.bin");
    ds.test = parse_cifar_records(read_file(dir / "test.bin", ErrorKind::dataset_not_found), 2, 1, 100, "test.bin");
    ds.norm = compute_normalization(ds.train);
    return ds;
}

/// Encodes 32x32 images back into CIFAR records (label bytes first, then planar RGB).
inline std::vector<std::uint8_t> encode_cifar_records(const Split& split, std::size_t label_bytes) {
    std::vector<std::uint8_t> out;
    out.reserve(split.size() * (label_bytes + cifar_pixels));
    for (std::size_t r = 0; r < split.size(); ++r) {
        const auto& img = split.images[r];
        require(img.height == 32 && img.width == 32, ErrorKind::invalid_argument, "CIFAR records hold 32x32 images");
        for (std::size_t b = 0; b < label_bytes; ++b) out.push_back(static_cast<std::uint8_t>(split.labels[r]));
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < 1024; ++i) out.push_back(img.pixels[i * 3 + c]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthParams {
    int classes = 4;
    std::size_t per_class = 500;
    std::size_t test_per_class = 100;
    std::size_t image_size = 16;
    double separation = 60.0;  // class color amplitude in pixel units
    double noise = 20.0;       // per-pixel gaussian std in pixel units
    std::uint64_t seed = 0;

    void validate() const {
        require(classes >= 2, ErrorKind::invalid_argument, "synthetic data needs at least 2 classes");
        require(per_class >= 1 && image_size >= 2, ErrorKind::invalid_argument, "per_class and image_size must be positive");
        require(separation > 0.0 && noise >= 0.0, ErrorKind::invalid_argument, "separation must be > 0 and noise >= 0");
    }

    friend bool operator==(const SynthParams&, const SynthParams&) = default;
};

inline double standard_normal(Rng& rng) {
    const double u1 = std::max(rng.uniform(), 1e-300);
    const double u2 = rng.uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double hh = h * 6.0;
    const int sector = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

inline std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double d = mx - mn;
    double h = 0;
    if (d > 0) {
        if (mx == r) h = std::fmod((g - b) / d, 6.0);
        else if (mx == g) h = (b - r) / d + 2.0;
        else h = (r - g) / d + 4.0;
        h /= 6.0;
        if (h < 0) h += 1.0;
    }
    return {h, mx > 0 ? d / mx : 0.0, mx};
}

/// Class-conditioned images: a class hue plus an oriented grating whose
/// orientation and frequency depend on the class. Nuisances are phase,
/// brightness offset and pixel noise, so the class survives crops and flips.
inline DatasetHandle synth_blobs(const SynthParams& p) {
    p.validate();
    struct Proto {
        std::array<double, 3> color;
        bool vertical;
        double freq;
    };
    Rng proto_rng(mix_seed(p.seed, 0xC1A55));
    std::vector<Proto> protos;
    for (int c = 0; c < p.classes; ++c) {
        const double hue = (c + proto_rng.uniform(-0.15, 0.15)) / p.classes;
        const auto rgb = hsv_to_rgb(hue, 1.0, 1.0);
        Proto pr{};
        for (std::size_t k = 0; k < 3; ++k) pr.color[k] = 2.0 * rgb[k] - 1.0;
        pr.vertical = c % 2 == 1;
        pr.freq = 1.0 + static_cast<double>((c / 2) % 3);
        protos.push_back(pr);
    }
    const double texture_amp = 24.0;
    const auto size = p.image_size;
    auto make_split = [&](std::size_t per_class, std::uint64_t stream) {
        Split s;
        Rng rng(mix_seed(p.seed, stream));
        const std::size_t n = per_class * static_cast<std::size_t>(p.classes);
        for (std::size_t i = 0; i < n; ++i) {
            const int label = static_cast<int>(i % static_cast<std::size_t>(p.classes));
            const auto& pr = protos[static_cast<std::size_t>(label)];
            const double phase = rng.uniform(0, 2 * std::numbers::pi);
            const double offset = rng.uniform(-15, 15);
            ImageU8 img{size, size, std::vector<std::uint8_t>(size * size * 3)};
            for (std::size_t y = 0; y < size; ++y) {
                for (std::size_t x = 0; x < size; ++x) {
                    const double coord = static_cast<double>(pr.vertical ? x : y) / static_cast<double>(size);
                    const double tex = texture_amp * std::sin(2 * std::numbers::pi * pr.freq * coord + phase);
                    for (std::size_t c = 0; c < 3; ++c) {
                        double v = 128.0 + p.separation * 0.5 * pr.color[c] + tex + offset;
                        if (p.noise > 0) v += p.noise * standard_normal(rng);
                        img.pixels[(y * size + x) * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
                    }
                }
            }
            s.images.push_back(std::move(img));
            s.labels.push_back(label);
        }
        return s;
    };
    DatasetHandle ds;
    ds.kind = DatasetKind::synthetic;
    ds.class_count = p.classes;
    ds.train = make_split(p.per_class, 1);
    ds.test = make_split(p.test_per_class, 2);
    ds.norm = compute_normalization(ds.train);
    return ds;
}

// Raw dataset file: "RMDS", u32 version, u32 kind, u32 classes, then per split
// u64 count, u32 height, u32 width, labels as u8 pairs (lo, hi), pixel bytes.
inline void save_dataset(const std::filesystem::path& path, const DatasetHandle& ds) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io_error, "cannot write " + path.string());
    auto u32 = [&out](std::uint32_t v) {
        for (int b = 0; b < 4; ++b) out.put(static_cast<char>((v >> (8 * b)) & 0xFF));
    };
    auto u64 = [&out](std::uint64_t v) {
        for (int b = 0; b < 8; ++b) out.put(static_cast<char>((v >> (8 * b)) & 0xFF));
    };
    out.write("RMDS", 4);
    u32(1);
    u32(static_cast<std::uint32_t>(ds.kind));
    u32(static_cast<std::uint32_t>(ds.class_count));
    for (const Split* s : {&ds.train, &ds.test}) {
        u64(s->size());
        const std::size_t h = s->size() ? s->images[0].height : 0, w = s->size() ? s->images[0].width : 0;
        u32(static_cast<std::uint32_t>(h));
        u32(static_cast<std::uint32_t>(w));
        for (int label : s->labels) {
            out.put(static_cast<char>(label & 0xFF));
            out.put(static_cast<char>((label >> 8) & 0xFF));
        }
        for (const auto& img : s->images) {
            require(img.height == h && img.width == w, ErrorKind::invalid_argument, "raw datasets need uniform image sizes");
            out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
        }
    }
    require(static_cast<bool>(out), ErrorKind::io_error, "short write to " + path.string());
}

inline DatasetHandle load_dataset(const std::filesystem::path& path) {
    const auto bytes = read_file(path, ErrorKind::dataset_not_found);
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
        require(pos + n <= bytes.size(), ErrorKind::truncated_record, path.string() + ": truncated at byte " + std::to_string(pos));
    };
    auto u32 = [&] {
        need(4);
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * b);
        return v;
    };
    auto u64 = [&] {
        need(8);
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * b);
        return v;
    };
    need(4);
    require(std::memcmp(bytes.data(), "RMDS", 4) == 0, ErrorKind::truncated_record, path.string() + ": bad magic");
    pos = 4;
    require(u32() == 1, ErrorKind::truncated_record, path.string() + ": unsupported version");
    DatasetHandle ds;
    const auto kind = u32();
    require(kind <= 2, ErrorKind::truncated_record, path.string() + ": bad dataset kind");
    ds.kind = static_cast<DatasetKind>(kind);
    ds.class_count = static_cast<int>(u32());
    for (Split* s : {&ds.train, &ds.test}) {
        const auto n = u64();
        const std::size_t h = u32(), w = u32();
        need(n * 2);
        for (std::uint64_t i = 0; i < n; ++i) {
            s->labels.push_back(bytes[pos] | (bytes[pos + 1] << 8));
            pos += 2;
        }
        need(n * h * w * 3);
        for (std::uint64_t i = 0; i < n; ++i) {
            ImageU8 img{h, w, std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                                        bytes.begin() + static_cast<std::ptrdiff_t>(pos + h * w * 3))};
            pos += h * w * 3;
            s->images.push_back(std::move(img));
        }
        validate_labels(*s, ds.class_count);
    }
    require(pos == bytes.size(), ErrorKind::truncated_record, path.string() + ": trailing bytes");
    ds.norm = compute_normalization(ds.train);
    return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
    double min_scale = 0.2;
    std::size_t crop_size = 32;
    double crop_p = 1.0;
    double brightness = 0.4;
    double contrast = 0.4;
    double saturation = 0.2;
    double hue = 0.1;
    double jitter_apply_p = 0.8;
    double blur_p = 1.0;
    double solarize_p = 0.0;
    double hflip_p = 0.5;
    double grayscale_p = 0.0;

    void validate() const {
        for (double p : {crop_p, jitter_apply_p, blur_p, solarize_p, hflip_p, grayscale_p}) {
            require(p >= 0.0 && p <= 1.0, ErrorKind::invalid_argument, "augmentation probabilities must be in [0,1]");
        }
        require(min_scale > 0.0 && min_scale <= 1.0, ErrorKind::invalid_argument, "min_scale must be in (0,1]");
        require(hue >= 0.0 && hue <= 0.5, ErrorKind::invalid_argument, "hue intensity must be in [0,0.5]");
        require(brightness >= 0 && contrast >= 0 && saturation >= 0, ErrorKind::invalid_argument,
                "jitter intensities must be nonnegative");
        require(crop_size >= 1, ErrorKind::invalid_argument, "crop_size must be positive");
    }

    /// First view: always blurred, never solarized.
    static AugmentParams view1(std::size_t crop = 32) {
        AugmentParams p;
        p.crop_size = crop;
        return p;
    }

    /// Second view: rarely blurred, sometimes solarized.
    static AugmentParams view2(std::size_t crop = 32) {
        AugmentParams p;
        p.crop_size = crop;
        p.blur_p = 0.1;
        p.solarize_p = 0.2;
        return p;
    }

    /// Everything off: a plain resize of the whole image.
    static AugmentParams identity(std::size_t crop) {
        AugmentParams p;
        p.crop_size = crop;
        p.min_scale = 1.0;
        p.crop_p = 0;
        p.jitter_apply_p = 0;
        p.blur_p = 0;
        p.solarize_p = 0;
        p.hflip_p = 0;
        return p;
    }

    friend bool operator==(const AugmentParams&, const AugmentParams&) = default;
};

struct CropBox {
    std::size_t top = 0, left = 0, height = 0, width = 0;
};

/// Random resized crop geometry: area fraction in [min_scale, 1] and aspect
/// ratio log-uniform in [3/4, 4/3]; falls back to the centered full-area box.
inline CropBox sample_crop(std::size_t height, std::size_t width, double min_scale, Rng& rng) {
    const double area = static_cast<double>(height * width);
    const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(min_scale, 1.0);
        const double ratio = std::exp(rng.uniform(log_lo, log_hi));
        const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
        const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
        if (w >= 1 && h >= 1 && w <= width && h <= height && static_cast<double>(w * h) >= min_scale * area) {
            const auto top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(height - h)));
            const auto left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(width - w)));
            return {top, left, h, w};
        }
    }
    return {0, 0, height, width};
}

/// Float planar image, values in [0,255].
struct FloatImage {
    std::size_t size = 0;
    std::vector<float> data;  // 3 x size x size

    float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * size + y) * size + x]; }
    [[nodiscard]] float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * size + y) * size + x]; }
};

/// Bilinear resize of a crop with half-pixel centers.
inline FloatImage resize_crop(const ImageU8& img, const CropBox& box, std::size_t out) {
    FloatImage r{out, std::vector<float>(3 * out * out)};
    const double sy = static_cast<double>(box.height) / static_cast<double>(out);
    const double sx = static_cast<double>(box.width) / static_cast<double>(out);
    for (std::size_t y = 0; y < out; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(box.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, box.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(box.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, box.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < 3; ++c) {
                auto px = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(img.at(box.top + yy, box.left + xx, c)); };
                const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) + wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
                r.at(c, y, x) = static_cast<float>(v);
            }
        }
    }
    return r;
}

inline void hflip(FloatImage& im) {
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < im.size; ++y)
            for (std::size_t x = 0; x < im.size / 2; ++x) std::swap(im.at(c, y, x), im.at(c, y, im.size - 1 - x));
}

inline float clamp_pixel(double v) { return static_cast<float>(std::clamp(v, 0.0, 255.0)); }

inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

inline void adjust_brightness(FloatImage& im, double f) {
    for (auto& v : im.data) v = clamp_pixel(v * f);
}

inline void adjust_contrast(FloatImage& im, double f) {
    const std::size_t n = im.size * im.size;
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += luma(im.data[i], im.data[n + i], im.data[2 * n + i]);
    mean /= static_cast<double>(n);
    for (auto& v : im.data) v = clamp_pixel(f * v + (1 - f) * mean);
}

inline void adjust_saturation(FloatImage& im, double f) {
    const std::size_t n = im.size * im.size;
    for (std::size_t i = 0; i < n; ++i) {
        const double g = luma(im.data[i], im.data[n + i], im.data[2 * n + i]);
        for (std::size_t c = 0; c < 3; ++c) im.data[c * n + i] = clamp_pixel(f * im.data[c * n + i] + (1 - f) * g);
    }
}

/// Rotates hue by `shift` turns in HSV space, wrapping around.
inline void adjust_hue(FloatImage& im, double shift) {
    const std::size_t n = im.size * im.size;
    for (std::size_t i = 0; i < n; ++i) {
        auto hsv = rgb_to_hsv(im.data[i] / 255.0, im.data[n + i] / 255.0, im.data[2 * n + i] / 255.0);
        const auto rgb = hsv_to_rgb(hsv[0] + shift, hsv[1], hsv[2]);
        for (std::size_t c = 0; c < 3; ++c) im.data[c * n + i] = clamp_pixel(rgb[c] * 255.0);
    }
}

inline void to_grayscale(FloatImage& im) {
    const std::size_t n = im.size * im.size;
    for (std::size_t i = 0; i < n; ++i) {
        const auto g = static_cast<float>(luma(im.data[i], im.data[n + i], im.data[2 * n + i]));
        for (std::size_t c = 0; c < 3; ++c) im.data[c * n + i] = g;
    }
}

/// 10% of the image side, forced odd, at least 3 taps.
inline std::size_t blur_kernel_size(std::size_t image_size) {
    auto k = static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(image_size)));
    if (k % 2 == 0) ++k;
    return std::max<std::size_t>(k, 3);
}

/// Separable gaussian blur with reflect padding.
inline void gaussian_blur(FloatImage& im, std::size_t ksize, double sigma) {
    const auto r = static_cast<std::ptrdiff_t>(ksize / 2);
    std::vector<double> k(ksize);
    double total = 0;
    for (std::ptrdiff_t i = -r; i <= r; ++i) total += k[static_cast<std::size_t>(i + r)] = std::exp(-double(i * i) / (2 * sigma * sigma));
    for (auto& w : k) w /= total;
    const auto n = static_cast<std::ptrdiff_t>(im.size);
    auto reflect = [n](std::ptrdiff_t i) {
        if (n == 1) return std::ptrdiff_t{0};
        while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
        return i;
    };
    std::vector<float> tmp(im.data.size());
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::ptrdiff_t y = 0; y < n; ++y)
            for (std::ptrdiff_t x = 0; x < n; ++x) {
                double acc = 0;
                for (std::ptrdiff_t i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * im.at(c, y, reflect(x + i));
                tmp[(c * im.size + y) * im.size + x] = static_cast<float>(acc);
            }
        for (std::ptrdiff_t y = 0; y < n; ++y)
            for (std::ptrdiff_t x = 0; x < n; ++x) {
                double acc = 0;
                for (std::ptrdiff_t i = -r; i <= r; ++i)
                    acc += k[static_cast<std::size_t>(i + r)] * tmp[(c * im.size + reflect(y + i)) * im.size + x];
                im.at(c, y, x) = static_cast<float>(acc);
            }
    }
}

inline constexpr float solarize_threshold = 128.0f;

inline float solarize(float v) { return v >= solarize_threshold ? 255.0f - v : v; }

/// Inverts the pixels selected by `mask`; applying it twice restores the input.
inline void solarize_masked(FloatImage& im, const std::vector<bool>& mask) {
    for (std::size_t i = 0; i < im.data.size(); ++i) {
        if (mask[i]) im.data[i] = 255.0f - im.data[i];
    }
}

inline std::vector<bool> solarize_mask(const FloatImage& im) {
    std::vector<bool> mask(im.data.size());
    for (std::size_t i = 0; i < im.data.size(); ++i) mask[i] = im.data[i] >= solarize_threshold;
    return mask;
}

inline void normalize_into(const FloatImage& im, const Normalization& norm, float* out) {
    const std::size_t n = im.size * im.size;
    for (std::size_t c = 0; c < 3; ++c) {
        const double m = norm.mean[c], s = norm.std[c];
        for (std::size_t i = 0; i < n; ++i) out[c * n + i] = static_cast<float>((im.data[c * n + i] / 255.0 - m) / s);
    }
}

/// One augmented view, unnormalized, values in [0,255].
inline FloatImage augment(const ImageU8& img, const AugmentParams& p, Rng& rng) {
    CropBox box{0, 0, img.height, img.width};
    if (rng.bernoulli(p.crop_p)) box = sample_crop(img.height, img.width, p.min_scale, rng);
    FloatImage im = resize_crop(img, box, p.crop_size);
    if (rng.bernoulli(p.hflip_p)) hflip(im);
    if (rng.bernoulli(p.jitter_apply_p)) {
        const double b = rng.uniform(std::max(0.0, 1 - p.brightness), 1 + p.brightness);
        const double c = rng.uniform(std::max(0.0, 1 - p.contrast), 1 + p.contrast);
        const double s = rng.uniform(std::max(0.0, 1 - p.saturation), 1 + p.saturation);
        const double h = rng.uniform(-p.hue, p.hue);
        adjust_brightness(im, b);
        adjust_contrast(im, c);
        adjust_saturation(im, s);
        if (p.hue > 0) adjust_hue(im, h);
    }
    if (rng.bernoulli(p.grayscale_p)) to_grayscale(im);
    if (rng.bernoulli(p.blur_p)) gaussian_blur(im, blur_kernel_size(p.crop_size), rng.uniform(0.1, 2.0));
    if (rng.bernoulli(p.solarize_p)) {
        for (auto& v : im.data) v = solarize(v);
    }
    return im;
}

struct ViewPair {
    std::size_t size = 0;
    std::vector<float> x1, x2;  // 3 x size x size, normalized
};

/// Two independent views of one image, fully determined by `seed`.
inline ViewPair make_views(const ImageU8& img, const AugmentParams& p1, const AugmentParams& p2, const Normalization& norm,
                           std::uint64_t seed) {
    require(p1.crop_size == p2.crop_size, ErrorKind::invalid_argument, "both views need the same crop size");
    ViewPair v{p1.crop_size, std::vector<float>(3 * p1.crop_size * p1.crop_size), std::vector<float>(3 * p1.crop_size * p1.crop_size)};
    Rng r1(mix_seed(seed, 1)), r2(mix_seed(seed, 2));
    normalize_into(augment(img, p1, r1), norm, v.x1.data());
    normalize_into(augment(img, p2, r2), norm, v.x2.data());
    return v;
}

/// Unaugmented view for evaluation: whole image resized to `size`, normalized.
inline void center_view_into(const ImageU8& img, std::size_t size, const Normalization& norm, float* out) {
    normalize_into(resize_crop(img, CropBox{0, 0, img.height, img.width}, size), norm, out);
}

// ---------------------------------------------------------------------------
// Batching

/// One epoch's shuffled order. Per-sample augmentation seeds depend on the
/// dataset index, never on the position in the order.
struct EpochPlan {
    std::uint64_t epoch_seed = 0;
    std::size_t batch_size = 0;
    std::vector<std::size_t> order;

    [[nodiscard]] std::size_t batch_count() const { return order.size() / batch_size; }

    [[nodiscard]] std::span<const std::size_t> batch(std::size_t b) const {
        require(b < batch_count(), ErrorKind::invalid_argument, "batch index out of range");
        return {order.data() + b * batch_size, batch_size};
    }

    [[nodiscard]] std::uint64_t sample_seed(std::size_t index) const { return mix_seed(epoch_seed, index); }
};

inline std::uint64_t epoch_seed(std::uint64_t run_seed, std::int64_t epoch) {
    return mix_seed(run_seed, static_cast<std::uint64_t>(epoch));
}

/// Fisher-Yates shuffle seeded by `seed`; drop-last batching.
inline EpochPlan plan_epoch(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed) {
    require(batch_size >= 1, ErrorKind::invalid_argument, "batch_size must be positive");
    require(batch_size <= dataset_size, ErrorKind::batch_too_large,
            "batch size " + std::to_string(batch_size) + " exceeds dataset size " + std::to_string(dataset_size));
    EpochPlan plan{seed, batch_size, std::vector<std::size_t>(dataset_size)};
    std::iota(plan.order.begin(), plan.order.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = dataset_size; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
        std::swap(plan.order[i - 1], plan.order[j]);
    }
    return plan;
}

/// Two augmented views per sample and no labels.
template <typename T>
struct PretrainBatch {
    Tensor<T> x1, x2;
    std::vector<std::size_t> indices;
};

template <typename T>
PretrainBatch<T> make_pretrain_batch(const Split& split, const Normalization& norm, const EpochPlan& plan, std::size_t b,
                                     const AugmentParams& p1, const AugmentParams& p2) {
    const auto idx = plan.batch(b);
    const std::size_t s = p1.crop_size, per = 3 * s * s;
    std::vector<T> v1(idx.size() * per), v2(idx.size() * per);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto views = make_views(split.images[idx[i]], p1, p2, norm, plan.sample_seed(idx[i]));
        std::copy(views.x1.begin(), views.x1.end(), v1.begin() + static_cast<std::ptrdiff_t>(i * per));
        std::copy(views.x2.begin(), views.x2.end(), v2.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    const Shape shape{idx.size(), 3, s, s};
    return {Tensor<T>::from(shape, std::move(v1)), Tensor<T>::from(shape, std::move(v2)), {idx.begin(), idx.end()}};
}

/// Center views for rows [first, first + count) of a split.
template <typename T>
Tensor<T> eval_batch(const Split& split, const Normalization& norm, std::size_t size, std::size_t first, std::size_t count) {
    const std::size_t per = 3 * size * size;
    std::vector<float> buf(count * per);
    for (std::size_t i = 0; i < count; ++i) center_view_into(split.images[first + i], size, norm, buf.data() + i * per);
    return Tensor<T>::from(Shape{count, 3, size, size}, std::vector<T>(buf.begin(), buf.end()));
}

}  // namespace resmoco::data

#endif  // RESMOCO_PIPELINE_HPP
