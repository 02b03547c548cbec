#include "aanet/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "aanet/errors.hpp"

namespace aanet {

static_assert(std::endian::native == std::endian::little,
              "archive blobs are written in host order; big-endian hosts are unsupported");

namespace {

constexpr char kMagic[8] = {'A', 'A', 'N', 'E', 'T', 'A', 'R', 'C'};

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos, const std::filesystem::path& path) {
    if (pos + sizeof(T) > in.size()) {
        throw FormatError(path.string() + ": truncated archive at byte " + std::to_string(pos));
    }
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

const std::vector<double>& Archive::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("archive has no tensor '" + name + "'");
    return it->second;
}

void write_archive(const Archive& archive, const std::filesystem::path& path) {
    nlohmann::json manifest = archive.meta;
    nlohmann::json entries = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, values] : archive.tensors) {
        entries.push_back({{"name", name}, {"count", values.size()}, {"offset", offset}});
        offset += values.size();
    }
    manifest["tensors"] = entries;
    const std::string text = manifest.dump();

    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kArchiveVersion);
    put<std::uint64_t>(out, text.size());
    out += text;
    for (const auto& [name, values] : archive.tensors) {
        const auto* bytes = reinterpret_cast<const char*>(values.data());
        out.append(bytes, values.size() * sizeof(double));
    }
    write_file_atomic(path, out);
}

Archive read_archive(const std::filesystem::path& path) {
    const std::string in = read_file(path);
    if (in.size() < sizeof(kMagic) || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0) {
        throw FormatError(path.string() + ": not an archive (bad magic at byte 0)");
    }
    std::size_t pos = sizeof(kMagic);
    const auto version = get<std::uint32_t>(in, pos, path);
    if (version != kArchiveVersion) {
        throw FormatError(path.string() + ": unsupported archive version " + std::to_string(version));
    }
    const auto len = get<std::uint64_t>(in, pos, path);
    if (pos + len > in.size()) {
        throw FormatError(path.string() + ": truncated manifest at byte " + std::to_string(pos));
    }
    Archive a;
    try {
        a.meta = nlohmann::json::parse(in.substr(pos, len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": manifest is not valid JSON: " + e.what());
    }
    pos += len;
    const std::size_t blob_start = pos;
    for (const auto& entry : a.meta.at("tensors")) {
        const auto count = entry.at("count").get<std::uint64_t>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        const std::size_t begin = blob_start + offset * sizeof(double);
        if (begin + count * sizeof(double) > in.size()) {
            throw FormatError(path.string() + ": tensor '" + entry.at("name").get<std::string>() +
                              "' runs past end of file at byte " + std::to_string(begin));
        }
        std::vector<double> values(count);
        std::memcpy(values.data(), in.data() + begin, count * sizeof(double));
        a.tensors.emplace(entry.at("name").get<std::string>(), std::move(values));
    }
    a.meta.erase("tensors");
    return a;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("io", "cannot open " + tmp.string() + " for writing");
        os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!os) throw Error("io", "failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("io", "cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace aanet
