#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "aanet/data.hpp"

namespace aanet {

// Per-class train/test sample sets. Sample labels equal their class index.
struct Dataset {
    ImageShape shape;
    int num_classes = 0;
    std::vector<std::vector<Sample>> train;
    std::vector<std::vector<Sample>> test;

    std::size_t train_count() const;
    std::size_t test_count() const;
    // Renumbers classes so that class order[i] becomes class i.
    Dataset relabeled(std::span<const int> order) const;
};

// CIFAR-10/100 binary layout: 1 label byte followed by 3072 pixel bytes
// (R plane, G plane, B plane of a 32x32 image). Pixels are scaled to [0,1].
inline constexpr std::size_t kCifarRecordBytes = 3073;
inline const ImageShape kCifarShape{3, 32, 32};

std::vector<Sample> read_cifar_records(const std::filesystem::path& file, int num_classes);
void write_cifar_records(const std::filesystem::path& file, std::span<const Sample> samples);

// Reads data_batch_*.bin (train) and test_batch.bin (test) from `dir`.
// `max_train_per_class` = 0 keeps everything.
Dataset load_cifar_binary(const std::filesystem::path& dir, int num_classes = 10,
                          std::size_t max_train_per_class = 0);

struct SyntheticSpec {
    int num_classes = 10;
    int train_per_class = 60;
    int test_per_class = 30;
    int image_size = 8;
    int channels = 3;
    double separation = 1.0;
    double noise = 1.0;
    std::uint64_t seed = 7;

    void validate() const;
    bool operator==(const SyntheticSpec&) const = default;
};

// Smoothed Gaussian class templates plus i.i.d. Gaussian pixel noise.
Dataset gen_synthetic(const SyntheticSpec& spec);

// Class templates used by gen_synthetic, one flattened image per class.
std::vector<std::vector<double>> synthetic_templates(const SyntheticSpec& spec);

}  // namespace aanet
