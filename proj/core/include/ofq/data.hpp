#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ofq/config.hpp"
#include "ofq/tensor.hpp"

namespace ofq {

/// Images of shape [C×H×W] with integer labels.
struct Dataset {
    std::vector<Tensor> images;
    std::vector<std::size_t> labels;
    std::size_t classes = 0;

    std::size_t size() const { return images.size(); }
    bool empty() const { return images.empty(); }
    std::vector<const Tensor*> pointers() const;
};

struct DataSplit {
    Dataset train;
    Dataset val;
};

/// Procedural class-conditional patterns (bars, box, diagonal, disk, cross)
/// at random positions, sizes and intensities plus Gaussian pixel noise.
Dataset synthetic_shapes(std::size_t size, std::uint64_t seed, std::size_t image, std::size_t channels,
                         std::size_t classes, double noise);

/// Binary format: magic "OFQDATA1", five little-endian u32 (count, channels,
/// height, width, classes), then per record a u32 label and C·H·W float32
/// pixels in row-major order.
Dataset read_external(const std::filesystem::path& path);
void write_external(const std::filesystem::path& path, const Dataset& data);

/// Seeded shuffle, then the last round(val_fraction·size) samples form the
/// validation set.
DataSplit split_dataset(const Dataset& data, double val_fraction, std::uint64_t seed);

/// Builds the dataset a config asks for and checks it against the model shape.
DataSplit make_dataset(const DataConfig& cfg, const ModelConfig& model, std::uint64_t seed);

}  // namespace ofq
