#include "ofq/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <tuple>

#include "ofq/errors.hpp"

namespace ofq {

std::vector<const Tensor*> Dataset::pointers() const {
    std::vector<const Tensor*> out;
    out.reserve(images.size());
    for (const auto& t : images) out.push_back(&t);
    return out;
}

namespace {

constexpr std::size_t kShapeKinds = 6;

void draw(Tensor& img, std::size_t S, std::size_t label, double intensity, std::mt19937_64& rng) {
    auto put = [&](long y, long x) {
        if (y < 0 || x < 0 || y >= static_cast<long>(S) || x >= static_cast<long>(S)) return;
        img[static_cast<std::size_t>(y) * S + static_cast<std::size_t>(x)] += intensity;
    };
    const long s = static_cast<long>(S);
    auto uniform = [&](long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(rng); };
    switch (label) {
        case 0: {  // horizontal bar
            const long len = uniform(s / 2, s - 2), y = uniform(1, s - 3), x0 = uniform(0, s - len);
            for (long t = 0; t < 2; ++t)
                for (long x = x0; x < x0 + len; ++x) put(y + t, x);
            break;
        }
        case 1: {  // vertical bar
            const long len = uniform(s / 2, s - 2), x = uniform(1, s - 3), y0 = uniform(0, s - len);
            for (long t = 0; t < 2; ++t)
                for (long y = y0; y < y0 + len; ++y) put(y, x + t);
            break;
        }
        case 2: {  // hollow box
            const long side = uniform(s / 3 + 1, s - 4), y0 = uniform(0, s - side), x0 = uniform(0, s - side);
            for (long k = 0; k < side; ++k) {
                put(y0, x0 + k);
                put(y0 + side - 1, x0 + k);
                put(y0 + k, x0);
                put(y0 + k, x0 + side - 1);
            }
            break;
        }
        case 3: {  // diagonal
            const long len = uniform(s / 2, s - 2), y0 = uniform(0, s - len), x0 = uniform(0, s - len);
            for (long k = 0; k < len; ++k) {
                put(y0 + k, x0 + k);
                put(y0 + k, x0 + k + 1);
            }
            break;
        }
        case 4: {  // filled disk
            const double r = std::uniform_real_distribution<double>(2.0, s / 4.0)(rng);
            const double cy = std::uniform_real_distribution<double>(r, s - r)(rng);
            const double cx = std::uniform_real_distribution<double>(r, s - r)(rng);
            for (long y = 0; y < s; ++y)
                for (long x = 0; x < s; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) put(y, x);
            break;
        }
        default: {  // cross
            const long arm = uniform(2, s / 4), cy = uniform(arm, s - arm - 1), cx = uniform(arm, s - arm - 1);
            for (long k = -arm; k <= arm; ++k) {
                put(cy + k, cx);
                put(cy, cx + k);
            }
            break;
        }
    }
}

}  // namespace

Dataset synthetic_shapes(std::size_t size, std::uint64_t seed, std::size_t image, std::size_t channels,
                         std::size_t classes, double noise) {
    if (classes == 0 || classes > kShapeKinds) {
        throw ConfigError("synthetic-shapes supports 1 to " + std::to_string(kShapeKinds) + " classes, got " +
                          std::to_string(classes));
    }
    if (image < 8) throw ConfigError("synthetic-shapes needs images of at least 8×8");
    if (channels == 0) throw ConfigError("synthetic-shapes needs at least one channel");
    if (noise < 0) throw ConfigError("synthetic-shapes noise must be non-negative");
    Dataset d;
    d.classes = classes;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, noise);
    std::uniform_real_distribution<double> inten(0.6, 1.2);
    for (std::size_t n = 0; n < size; ++n) {
        const std::size_t label = n % classes;
        Tensor img(Shape{channels, image, image});
        Tensor plane(Shape{image * image});
        draw(plane, image, label, inten(rng), rng);
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t i = 0; i < image * image; ++i) {
                img[c * image * image + i] = plane[i] + (noise > 0 ? gauss(rng) : 0.0);
            }
        }
        d.images.push_back(std::move(img));
        d.labels.push_back(label);
    }
    return d;
}

namespace {

constexpr char kDataMagic[8] = {'O', 'F', 'Q', 'D', 'A', 'T', 'A', '1'};

}  // namespace

Dataset read_external(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset " + path.string());
    std::size_t offset = 0;
    auto read = [&](void* p, std::size_t n, const char* what) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n) {
            throw IoError(path.string() + " at offset " + std::to_string(offset) + ": truncated while reading " + what);
        }
        offset += n;
    };
    char magic[8];
    read(magic, sizeof magic, "magic");
    if (std::memcmp(magic, kDataMagic, sizeof magic) != 0) {
        throw IoError(path.string() + " at offset 0: bad magic, not an ofq dataset");
    }
    std::uint32_t hdr[5];
    read(hdr, sizeof hdr, "header");
    const auto [count, channels, height, width, classes] = std::tuple(hdr[0], hdr[1], hdr[2], hdr[3], hdr[4]);
    if (channels == 0 || height == 0 || width == 0 || classes == 0) {
        throw IoError(path.string() + " at offset 8: zero extent in header");
    }
    Dataset d;
    d.classes = classes;
    std::vector<float> pixels(static_cast<std::size_t>(channels) * height * width);
    for (std::uint32_t n = 0; n < count; ++n) {
        std::uint32_t label;
        read(&label, sizeof label, "label");
        if (label >= classes) {
            throw IoError(path.string() + " at offset " + std::to_string(offset - 4) + ": label " +
                          std::to_string(label) + " out of range");
        }
        read(pixels.data(), pixels.size() * sizeof(float), "pixels");
        Tensor img(Shape{channels, height, width});
        for (std::size_t i = 0; i < pixels.size(); ++i) img[i] = pixels[i];
        if (!img.all_finite()) {
            throw IoError(path.string() + " at offset " + std::to_string(offset) + ": non-finite pixel in record " +
                          std::to_string(n));
        }
        d.images.push_back(std::move(img));
        d.labels.push_back(label);
    }
    return d;
}

void write_external(const std::filesystem::path& path, const Dataset& data) {
    if (data.empty()) throw ContractError("write_external: dataset is empty");
    const Shape& s = data.images.front().shape();
    if (s.size() != 3) throw DimensionError("write_external: images must be [C×H×W]");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(kDataMagic, sizeof kDataMagic);
    const std::uint32_t hdr[5] = {static_cast<std::uint32_t>(data.size()), static_cast<std::uint32_t>(s[0]),
                                  static_cast<std::uint32_t>(s[1]), static_cast<std::uint32_t>(s[2]),
                                  static_cast<std::uint32_t>(data.classes)};
    out.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
    std::vector<float> pixels;
    for (std::size_t n = 0; n < data.size(); ++n) {
        if (data.images[n].shape() != s) throw DimensionError("write_external: images differ in shape");
        const auto label = static_cast<std::uint32_t>(data.labels[n]);
        out.write(reinterpret_cast<const char*>(&label), sizeof label);
        pixels.assign(data.images[n].data().begin(), data.images[n].data().end());
        out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size() * 4));
    }
    if (!out) throw IoError("write failed: " + path.string());
}

DataSplit split_dataset(const Dataset& data, double val_fraction, std::uint64_t seed) {
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(data.size())));
    DataSplit s;
    s.train.classes = s.val.classes = data.classes;
    for (std::size_t k = 0; k < order.size(); ++k) {
        Dataset& dst = k + n_val < order.size() ? s.train : s.val;
        dst.images.push_back(data.images[order[k]]);
        dst.labels.push_back(data.labels[order[k]]);
    }
    return s;
}

DataSplit make_dataset(const DataConfig& cfg, const ModelConfig& model, std::uint64_t seed) {
    Dataset d;
    if (cfg.kind == "synthetic-shapes") {
        d = synthetic_shapes(cfg.size, seed, model.image, model.channels, model.classes, cfg.noise);
    } else if (cfg.kind == "external") {
        d = read_external(cfg.path);
        if (!d.empty() && d.images.front().shape() != Shape{model.channels, model.image, model.image}) {
            throw ConfigError("dataset " + cfg.path + " has images " + shape_to_string(d.images.front().shape()) +
                              " but the model expects " +
                              shape_to_string(Shape{model.channels, model.image, model.image}));
        }
        if (d.classes > model.classes) {
            throw ConfigError("dataset " + cfg.path + " has " + std::to_string(d.classes) + " classes, model has " +
                              std::to_string(model.classes));
        }
    } else {
        throw ConfigError("unknown dataset kind '" + cfg.kind + "'");
    }
    return split_dataset(d, cfg.val_fraction, seed);
}

}  // namespace ofq
