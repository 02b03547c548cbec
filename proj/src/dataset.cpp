#include "aanet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <regex>

#include "aanet/archive.hpp"
#include "aanet/errors.hpp"
#include "aanet/rng.hpp"

namespace aanet {

std::size_t Dataset::train_count() const {
    std::size_t n = 0;
    for (const auto& c : train) n += c.size();
    return n;
}

std::size_t Dataset::test_count() const {
    std::size_t n = 0;
    for (const auto& c : test) n += c.size();
    return n;
}

Dataset Dataset::relabeled(std::span<const int> order) const {
    if (order.size() != static_cast<std::size_t>(num_classes)) {
        throw ArgumentError("relabeled: class order must list every class once");
    }
    Dataset out;
    out.shape = shape;
    out.num_classes = num_classes;
    out.train.resize(order.size());
    out.test.resize(order.size());
    std::vector<bool> seen(order.size(), false);
    for (std::size_t i = 0; i < order.size(); ++i) {
        const int old = order[i];
        if (old < 0 || old >= num_classes || seen[static_cast<std::size_t>(old)]) {
            throw ArgumentError("relabeled: class order is not a permutation");
        }
        seen[static_cast<std::size_t>(old)] = true;
        out.train[i] = train[static_cast<std::size_t>(old)];
        out.test[i] = test[static_cast<std::size_t>(old)];
        for (Sample& s : out.train[i]) s.label = static_cast<int>(i);
        for (Sample& s : out.test[i]) s.label = static_cast<int>(i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// CIFAR binary
// ---------------------------------------------------------------------------

std::vector<Sample> read_cifar_records(const std::filesystem::path& file, int num_classes) {
    const std::string bytes = read_file(file);
    if (bytes.size() % kCifarRecordBytes != 0) {
        const std::size_t offset = bytes.size() - bytes.size() % kCifarRecordBytes;
        throw FormatError(file.string() + ": truncated record at byte offset " +
                          std::to_string(offset));
    }
    const std::size_t count = bytes.size() / kCifarRecordBytes;
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t r = 0; r < count; ++r) {
        const std::size_t offset = r * kCifarRecordBytes;
        const int label = static_cast<unsigned char>(bytes[offset]);
        if (label >= num_classes) {
            throw FormatError(file.string() + ": label " + std::to_string(label) +
                              " out of range at byte offset " + std::to_string(offset));
        }
        Sample s;
        s.label = label;
        s.pixels.resize(kCifarRecordBytes - 1);
        for (std::size_t i = 0; i + 1 < kCifarRecordBytes; ++i) {
            s.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[offset + 1 + i])) / 255.0f;
        }
        out.push_back(std::move(s));
    }
    return out;
}

void write_cifar_records(const std::filesystem::path& file, std::span<const Sample> samples) {
    std::string out;
    out.reserve(samples.size() * kCifarRecordBytes);
    for (const Sample& s : samples) {
        if (s.label < 0 || s.label > 255) throw ArgumentError("CIFAR labels must fit in one byte");
        if (s.pixels.size() != kCifarRecordBytes - 1) {
            throw DimensionError("CIFAR records hold exactly 3072 pixels");
        }
        out.push_back(static_cast<char>(s.label));
        for (float p : s.pixels) {
            const long v = std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f);
            out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
        }
    }
    write_file_atomic(file, out);
}

Dataset load_cifar_binary(const std::filesystem::path& dir, int num_classes,
                          std::size_t max_train_per_class) {
    if (!std::filesystem::is_directory(dir)) {
        throw DataError("CIFAR directory not found: " + dir.string());
    }
    std::vector<std::filesystem::path> train_files;
    const std::regex batch_re("data_batch_[0-9]+\\.bin");
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (std::regex_match(entry.path().filename().string(), batch_re)) {
            train_files.push_back(entry.path());
        }
    }
    std::sort(train_files.begin(), train_files.end());
    const auto test_file = dir / "test_batch.bin";
    if (train_files.empty() || !std::filesystem::exists(test_file)) {
        throw DataError(dir.string() + ": expected data_batch_*.bin and test_batch.bin");
    }
    Dataset ds;
    ds.shape = kCifarShape;
    ds.num_classes = num_classes;
    ds.train.resize(static_cast<std::size_t>(num_classes));
    ds.test.resize(static_cast<std::size_t>(num_classes));
    for (const auto& f : train_files) {
        for (Sample& s : read_cifar_records(f, num_classes)) {
            auto& bucket = ds.train[static_cast<std::size_t>(s.label)];
            if (max_train_per_class == 0 || bucket.size() < max_train_per_class) {
                bucket.push_back(std::move(s));
            }
        }
    }
    for (Sample& s : read_cifar_records(test_file, num_classes)) {
        ds.test[static_cast<std::size_t>(s.label)].push_back(std::move(s));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic
// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
    if (num_classes < 2 || train_per_class <= 0 || test_per_class <= 0 || image_size <= 0 ||
        channels <= 0) {
        throw ConfigError("synthetic: class count, sample counts and image size must be positive");
    }
    if (!(separation > 0.0) || !(noise >= 0.0)) {
        throw ConfigError("synthetic: separation must be positive and noise non-negative");
    }
}

std::vector<std::vector<double>> synthetic_templates(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const int s = spec.image_size;
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    std::vector<std::vector<double>> templates;
    for (int c = 0; c < spec.num_classes; ++c) {
        std::vector<double> raw(plane * spec.channels);
        for (double& v : raw) v = rng.normal();
        // 3x3 box blur (wrap-around) gives each template local structure that
        // a small convolutional network can pick up.
        std::vector<double> t(raw.size(), 0.0);
        for (int ch = 0; ch < spec.channels; ++ch) {
            for (int y = 0; y < s; ++y) {
                for (int x = 0; x < s; ++x) {
                    double acc = 0.0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx)
                            acc += raw[ch * plane + ((y + dy + s) % s) * s + (x + dx + s) % s];
                    t[ch * plane + y * s + x] = spec.separation * acc / 3.0;
                }
            }
        }
        templates.push_back(std::move(t));
    }
    return templates;
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
    const auto templates = synthetic_templates(spec);
    Dataset ds;
    ds.shape = ImageShape{spec.channels, spec.image_size, spec.image_size};
    ds.num_classes = spec.num_classes;
    ds.train.resize(static_cast<std::size_t>(spec.num_classes));
    ds.test.resize(static_cast<std::size_t>(spec.num_classes));
    Rng rng(spec.seed ^ 0x5EEDF00DULL);
    auto draw = [&](int cls) {
        Sample smp;
        smp.label = cls;
        const auto& t = templates[static_cast<std::size_t>(cls)];
        smp.pixels.resize(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) {
            smp.pixels[i] = static_cast<float>(t[i] + spec.noise * rng.normal());
        }
        return smp;
    };
    for (int c = 0; c < spec.num_classes; ++c) {
        for (int i = 0; i < spec.train_per_class; ++i) ds.train[static_cast<std::size_t>(c)].push_back(draw(c));
        for (int i = 0; i < spec.test_per_class; ++i) ds.test[static_cast<std::size_t>(c)].push_back(draw(c));
    }
    return ds;
}

}  // namespace aanet
