#include "pmil/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "pmil/rng.hpp"

namespace pmil {

namespace fs = std::filesystem;

namespace {
constexpr char kMagic[] = "PMILCKPT1";

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}
}  // namespace

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    std::ostringstream head;
    head << kMagic << "\n";
    head << "meta " << ckpt.meta.size() << "\n";
    for (const auto& [k, v] : ckpt.meta) head << k << " = " << v << "\n";
    head << "index " << ckpt.params.entries.size() << "\n";
    std::size_t offset = 0;
    for (const auto& [name, t] : ckpt.params.entries) {
        head << name << " " << (t.requires_grad ? 1 : 0) << " " << t.shape.size();
        for (int d : t.shape) head << " " << d;
        head << " " << offset << "\n";
        offset += t.numel() * 4;
    }
    head << "data " << offset / 4 << "\n";

    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint for write: " + path.string());
    const std::string h = head.str();
    f.write(h.data(), static_cast<std::streamsize>(h.size()));
    static_assert(sizeof(float) == 4);
    for (const auto& [name, t] : ckpt.params.entries)
        f.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * 4));
    if (!f) throw FormatError("checkpoint write failed: " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint: " + path.string());
    std::string line;
    if (!std::getline(f, line) || line != kMagic)
        throw FormatError("bad checkpoint magic in " + path.string());

    Checkpoint ckpt;
    if (!std::getline(f, line) || line.rfind("meta ", 0) != 0)
        throw FormatError("missing meta block in " + path.string());
    const int n_meta = std::stoi(line.substr(5));
    for (int i = 0; i < n_meta; ++i) {
        if (!std::getline(f, line)) throw FormatError("truncated meta in " + path.string());
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) throw FormatError("bad meta line in " + path.string());
        ckpt.meta[trim(line.substr(0, eq))] = trim(line.substr(eq + 3));
    }

    if (!std::getline(f, line) || line.rfind("index ", 0) != 0)
        throw FormatError("missing index block in " + path.string());
    const int n_entries = std::stoi(line.substr(6));
    struct Entry {
        std::string name;
        bool trainable;
        std::vector<int> shape;
        std::size_t offset;
    };
    std::vector<Entry> entries;
    for (int i = 0; i < n_entries; ++i) {
        if (!std::getline(f, line)) throw FormatError("truncated index in " + path.string());
        std::istringstream ls(line);
        Entry e;
        int trainable = 0, ndims = 0;
        ls >> e.name >> trainable >> ndims;
        e.trainable = trainable != 0;
        e.shape.resize(ndims);
        for (int d = 0; d < ndims; ++d) ls >> e.shape[d];
        ls >> e.offset;
        if (!ls) throw FormatError("bad index line in " + path.string());
        entries.push_back(std::move(e));
    }
    if (!std::getline(f, line) || line.rfind("data ", 0) != 0)
        throw FormatError("missing data block in " + path.string());

    const std::streampos payload = f.tellg();
    for (const auto& e : entries) {
        Tensor<float> t = Tensor<float>::zeros(e.shape);
        f.seekg(payload + static_cast<std::streamoff>(e.offset));
        if (!f.read(reinterpret_cast<char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * 4)))
            throw FormatError("truncated checkpoint payload in " + path.string());
        ckpt.params.add(e.name, std::move(t), e.trainable);
    }
    return ckpt;
}

std::string file_fingerprint(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open for fingerprint: " + path.string());
    std::uint64_t h = 14695981039346656037ull;
    char buf[4096];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
        for (std::streamsize i = 0; i < f.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (!f) break;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

void encode_backbone_config(const BackboneConfig& cfg, std::map<std::string, std::string>& meta) {
    meta["backbone.in_channels"] = std::to_string(cfg.in_channels);
    meta["backbone.channels"] = std::to_string(cfg.channels);
    meta["backbone.height"] = std::to_string(cfg.height);
    meta["backbone.width"] = std::to_string(cfg.width);
    meta["backbone.num_blocks"] = std::to_string(cfg.num_blocks);
    meta["backbone.reduction"] = std::to_string(cfg.reduction);
    meta["backbone.preset"] = cfg.preset_name;
    std::string sites;
    for (int s : cfg.prompt_sites) {
        if (!sites.empty()) sites += ",";
        sites += std::to_string(s);
    }
    meta["backbone.prompt_sites"] = sites;
}

BackboneConfig decode_backbone_config(const std::map<std::string, std::string>& meta) {
    auto get = [&meta](const std::string& k) {
        auto it = meta.find(k);
        if (it == meta.end()) throw FormatError("checkpoint missing meta key: " + k);
        return it->second;
    };
    BackboneConfig cfg;
    cfg.in_channels = std::stoi(get("backbone.in_channels"));
    cfg.channels = std::stoi(get("backbone.channels"));
    cfg.height = std::stoi(get("backbone.height"));
    cfg.width = std::stoi(get("backbone.width"));
    cfg.num_blocks = std::stoi(get("backbone.num_blocks"));
    cfg.reduction = std::stoi(get("backbone.reduction"));
    auto it = meta.find("backbone.preset");
    if (it != meta.end()) cfg.preset_name = it->second;
    cfg.prompt_sites.clear();
    std::istringstream ss(get("backbone.prompt_sites"));
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) cfg.prompt_sites.push_back(std::stoi(tok));
    cfg.validate();
    return cfg;
}

}  // namespace pmil
