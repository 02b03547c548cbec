#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace aanet {

// Single-file container: a JSON manifest plus named float64 blobs.
//
//   bytes 0..7   magic "AANETARC"
//   bytes 8..11  format version (u32, little endian)
//   bytes 12..19 manifest length L (u64)
//   next L bytes manifest JSON; manifest["tensors"] lists {name, count, offset}
//   remainder    concatenated little-endian IEEE-754 doubles
struct Archive {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, std::vector<double>> tensors;

    const std::vector<double>& tensor(const std::string& name) const;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

void write_archive(const Archive& archive, const std::filesystem::path& path);
Archive read_archive(const std::filesystem::path& path);

// Writes to "<path>.tmp" then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace aanet
