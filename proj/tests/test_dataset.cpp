#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "aanet/archive.hpp"
#include "aanet/dataset.hpp"
#include "aanet/errors.hpp"
#include "aanet/rng.hpp"

using namespace aanet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("aanet_dataset_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<Sample> byte_exact_samples(int n, Rng& rng) {
    std::vector<Sample> out;
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.label = static_cast<int>(rng.below(10));
        s.pixels.resize(3072);
        for (float& p : s.pixels) p = static_cast<float>(rng.below(256)) / 255.0f;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TEST(Cifar, WriteReloadIsBitExact) {
    const fs::path dir = scratch("roundtrip");
    Rng rng(1);
    const auto samples = byte_exact_samples(10, rng);
    write_cifar_records(dir / "batch.bin", samples);
    EXPECT_EQ(fs::file_size(dir / "batch.bin"), 10 * kCifarRecordBytes);
    const auto back = read_cifar_records(dir / "batch.bin", 10);
    ASSERT_EQ(back.size(), 10u);
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].label, samples[i].label);
        EXPECT_EQ(back[i].pixels, samples[i].pixels);
    }
}

TEST(Cifar, LabelOutOfRangeReportsOffset) {
    const fs::path dir = scratch("label");
    Rng rng(2);
    auto samples = byte_exact_samples(3, rng);
    samples[1].label = 255;
    write_cifar_records(dir / "bad.bin", samples);
    try {
        read_cifar_records(dir / "bad.bin", 10);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("3073"), std::string::npos) << e.what();
    }
}

TEST(Cifar, TruncatedFileIsFormatError) {
    const fs::path dir = scratch("trunc");
    Rng rng(3);
    write_cifar_records(dir / "t.bin", byte_exact_samples(2, rng));
    fs::resize_file(dir / "t.bin", kCifarRecordBytes + 100);
    EXPECT_THROW(read_cifar_records(dir / "t.bin", 10), FormatError);
}

TEST(Cifar, LoadDirectorySplitsTrainAndTest) {
    const fs::path dir = scratch("dir");
    Rng rng(4);
    write_cifar_records(dir / "data_batch_1.bin", byte_exact_samples(20, rng));
    write_cifar_records(dir / "data_batch_2.bin", byte_exact_samples(20, rng));
    write_cifar_records(dir / "test_batch.bin", byte_exact_samples(7, rng));
    const Dataset ds = load_cifar_binary(dir);
    EXPECT_EQ(ds.train_count(), 40u);
    EXPECT_EQ(ds.test_count(), 7u);
    EXPECT_EQ(ds.shape, kCifarShape);
    for (std::size_t c = 0; c < ds.train.size(); ++c)
        for (const Sample& s : ds.train[c]) EXPECT_EQ(s.label, static_cast<int>(c));
}

TEST(Cifar, MissingDirectoryIsDataError) {
    EXPECT_THROW(load_cifar_binary("/nonexistent/cifar"), Error);
}

TEST(Synthetic, Deterministic) {
    SyntheticSpec spec;
    const Dataset a = gen_synthetic(spec);
    const Dataset b = gen_synthetic(spec);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);
    spec.seed = 8;
    EXPECT_NE(gen_synthetic(spec).train, a.train);
}

TEST(Synthetic, ZeroNoiseReproducesTemplates) {
    SyntheticSpec spec;
    spec.noise = 0.0;
    const Dataset ds = gen_synthetic(spec);
    const auto templates = synthetic_templates(spec);
    for (int c = 0; c < spec.num_classes; ++c) {
        for (const Sample& s : ds.train[static_cast<std::size_t>(c)]) {
            for (std::size_t i = 0; i < s.pixels.size(); ++i) {
                EXPECT_EQ(s.pixels[i], static_cast<float>(templates[static_cast<std::size_t>(c)][i]));
            }
        }
    }
}

TEST(Synthetic, NearestTemplateAccuracyAtDefaults) {
    const SyntheticSpec spec;
    const Dataset ds = gen_synthetic(spec);
    const auto templates = synthetic_templates(spec);
    std::size_t correct = 0, total = 0;
    for (const auto& cls : ds.test) {
        for (const Sample& s : cls) {
            int best = -1;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < templates.size(); ++k) {
                double d = 0.0;
                for (std::size_t i = 0; i < s.pixels.size(); ++i) {
                    const double diff = s.pixels[i] - templates[k][i];
                    d += diff * diff;
                }
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(k);
                }
            }
            correct += best == s.label;
            ++total;
        }
    }
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(total), 0.95);
}

TEST(Synthetic, CountsAndShape) {
    SyntheticSpec spec;
    spec.num_classes = 4;
    spec.train_per_class = 5;
    spec.test_per_class = 3;
    const Dataset ds = gen_synthetic(spec);
    EXPECT_EQ(ds.train_count(), 20u);
    EXPECT_EQ(ds.test_count(), 12u);
    EXPECT_EQ(ds.train[0][0].pixels.size(), ds.shape.size());
}

TEST(Synthetic, InvalidSpecIsConfigError) {
    SyntheticSpec spec;
    spec.num_classes = 0;
    EXPECT_THROW(gen_synthetic(spec), ConfigError);
    spec = SyntheticSpec{};
    spec.noise = -1.0;
    EXPECT_THROW(gen_synthetic(spec), ConfigError);
}

TEST(Dataset, RelabelMovesClassesAndLabels) {
    SyntheticSpec spec;
    spec.num_classes = 3;
    spec.train_per_class = 2;
    spec.test_per_class = 1;
    const Dataset ds = gen_synthetic(spec);
    const std::vector<int> order{2, 0, 1};
    const Dataset r = ds.relabeled(order);
    EXPECT_EQ(r.train[0][0].pixels, ds.train[2][0].pixels);
    EXPECT_EQ(r.train[0][0].label, 0);
    const std::vector<int> bad{0, 0, 1};
    EXPECT_THROW(ds.relabeled(bad), ArgumentError);
}

TEST(Archive, RoundTripAndCorruption) {
    const fs::path dir = scratch("archive");
    Archive a;
    a.meta["kind"] = "test";
    a.tensors["x"] = {1.0, -0.0, 1e-300, std::numeric_limits<double>::max()};
    a.tensors["y"] = {};
    write_archive(a, dir / "a.arc");
    const Archive b = read_archive(dir / "a.arc");
    EXPECT_EQ(b.meta.at("kind"), "test");
    ASSERT_EQ(b.tensor("x").size(), 4u);
    EXPECT_TRUE(std::signbit(b.tensor("x")[1]));
    EXPECT_EQ(b.tensor("x"), a.tensors["x"]);
    EXPECT_THROW(b.tensor("missing"), FormatError);

    std::string bytes = read_file(dir / "a.arc");
    bytes[0] = 'X';
    write_file_atomic(dir / "bad.arc", bytes);
    EXPECT_THROW(read_archive(dir / "bad.arc"), FormatError);
    fs::resize_file(dir / "a.arc", fs::file_size(dir / "a.arc") - 8);
    EXPECT_THROW(read_archive(dir / "a.arc"), FormatError);
}
