#include "aanet/checkpoint.hpp"

#include "aanet/archive.hpp"
#include "aanet/errors.hpp"

namespace aanet {

namespace {

nlohmann::json arch_to_json(const ArchConfig& a) {
    nlohmann::json levels = nlohmann::json::array();
    for (const LevelArch& l : a.levels) {
        levels.push_back({{"out_channels", l.out_channels}, {"stride", l.stride}, {"blocks", l.blocks}});
    }
    return {{"in_channels", a.in_channels}, {"image_size", a.image_size},
            {"stem_channels", a.stem_channels}, {"kernel", a.kernel}, {"levels", levels}};
}

ArchConfig arch_from_json(const nlohmann::json& j) {
    ArchConfig a;
    a.in_channels = j.at("in_channels").get<int>();
    a.image_size = j.at("image_size").get<int>();
    a.stem_channels = j.at("stem_channels").get<int>();
    a.kernel = j.at("kernel").get<int>();
    a.levels.clear();
    for (const auto& l : j.at("levels")) {
        a.levels.push_back(LevelArch{l.at("out_channels").get<int>(), l.at("stride").get<int>(),
                                     l.at("blocks").get<int>()});
    }
    return a;
}

void put_layer(Archive& a, const std::string& prefix, const ConvLayer& layer) {
    a.tensors[prefix + "/weight"] = layer.weight;
    a.tensors[prefix + "/bias"] = layer.bias;
}

ConvLayer get_layer(const Archive& a, const std::string& prefix, const ConvGeometry& g) {
    ConvLayer layer{g, a.tensor(prefix + "/weight"), a.tensor(prefix + "/bias")};
    if (layer.weight.size() != g.weight_count() ||
        layer.bias.size() != static_cast<std::size_t>(g.out_channels)) {
        throw FormatError("checkpoint tensor '" + prefix + "' has the wrong size");
    }
    return layer;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const AANet& m = ckpt.model;
    Archive a;
    a.meta["version"] = kCheckpointVersion;
    a.meta["arch_tag"] = m.arch.tag();
    a.meta["arch"] = arch_to_json(m.arch);
    a.meta["phase_index"] = ckpt.phase_index;
    a.meta["has_base"] = static_cast<bool>(m.base);
    a.meta["num_classes"] = m.head.num_classes;
    nlohmann::json kinds = nlohmann::json::array();
    for (const LevelSpec& l : m.levels) {
        nlohmann::json entry = {{"plastic", std::string(to_string(l.plastic.kind))}};
        if (l.stable) entry["stable"] = std::string(to_string(l.stable->kind));
        kinds.push_back(entry);
    }
    a.meta["levels"] = kinds;

    if (m.base) {
        put_layer(a, "base/stem", m.base->stem);
        for (std::size_t k = 0; k < m.base->levels.size(); ++k) {
            for (std::size_t q = 0; q < m.base->levels[k].size(); ++q) {
                put_layer(a, "base/level" + std::to_string(k + 1) + "/layer" + std::to_string(q),
                          m.base->levels[k][q]);
            }
        }
    }
    for (const ConstParamView& v : parameters(m)) {
        a.tensors[v.name] = std::vector<double>(v.values.begin(), v.values.end());
    }
    std::vector<double> alphas;
    for (const AlphaPair& p : ckpt.alphas.per_level) {
        alphas.push_back(p.stable);
        alphas.push_back(p.plastic);
    }
    a.tensors["alpha"] = alphas;
    write_archive(a, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const Archive a = read_archive(path);
    if (a.meta.value("version", "") != kCheckpointVersion) {
        throw FormatError(path.string() + ": unsupported checkpoint version '" +
                          a.meta.value("version", "") + "'");
    }
    Checkpoint ckpt;
    ckpt.phase_index = a.meta.at("phase_index").get<int>();
    AANet& m = ckpt.model;
    m.arch = arch_from_json(a.meta.at("arch"));
    if (m.arch.tag() != a.meta.at("arch_tag").get<std::string>()) {
        throw FormatError(path.string() + ": arch_tag does not match the stored architecture");
    }
    const auto& kinds = a.meta.at("levels");
    if (kinds.size() != m.arch.levels.size()) {
        throw FormatError(path.string() + ": level count mismatch");
    }

    if (a.meta.at("has_base").get<bool>()) {
        auto base = std::make_shared<BaseBackbone>();
        base->arch_tag = m.arch.tag();
        base->embed_dim = m.arch.embed_dim();
        base->stem = get_layer(a, "base/stem", m.arch.stem_geometry());
        for (std::size_t k = 0; k < m.arch.levels.size(); ++k) {
            LevelParams level;
            const auto geoms = m.arch.level_geometries(static_cast<int>(k));
            for (std::size_t q = 0; q < geoms.size(); ++q) {
                level.push_back(get_layer(
                    a, "base/level" + std::to_string(k + 1) + "/layer" + std::to_string(q), geoms[q]));
            }
            base->levels.push_back(std::move(level));
        }
        m.base = base;
    }

    // Rebuild the parameter skeleton from the recorded kinds, then fill it.
    m.stem = ConvLayer::zeros(m.arch.stem_geometry());
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        const auto geoms = m.arch.level_geometries(static_cast<int>(k));
        LevelParams zeros;
        for (const auto& g : geoms) zeros.push_back(ConvLayer::zeros(g));
        LevelSpec spec;
        spec.level_index = static_cast<int>(k) + 1;
        spec.plastic = Branch::make(parse_branch_kind(kinds[k].at("plastic").get<std::string>()), zeros);
        if (kinds[k].contains("stable")) {
            spec.stable = Branch::make(parse_branch_kind(kinds[k].at("stable").get<std::string>()), zeros);
        }
        m.levels.push_back(std::move(spec));
    }
    m.head = ClassifierHead::empty(m.arch.embed_dim());
    m.head.num_classes = a.meta.at("num_classes").get<int>();
    m.head.weight.assign(static_cast<std::size_t>(m.head.num_classes) * m.head.embed_dim, 0.0);
    m.head.bias.assign(static_cast<std::size_t>(m.head.num_classes), 0.0);
    for (ParamView& v : parameters(m)) {
        const auto& stored = a.tensor(v.name);
        if (stored.size() != v.values.size()) {
            throw FormatError(path.string() + ": tensor '" + v.name + "' has the wrong size");
        }
        std::copy(stored.begin(), stored.end(), v.values.begin());
    }
    const auto& alpha = a.tensor("alpha");
    for (std::size_t i = 0; i + 1 < alpha.size(); i += 2) {
        ckpt.alphas.per_level.push_back(AlphaPair{alpha[i], alpha[i + 1]});
    }
    m.validate();
    return ckpt;
}

}  // namespace aanet
