#include "pmil/synthdata.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "pmil/rng.hpp"

namespace pmil {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr char kBagMagic[8] = {'P', 'M', 'I', 'L', 'B', 'A', 'G', '1'};
constexpr float kClamp = 50.0f;

// Class A: gaussian texture, mean 0. Class B: same texture plus delta on a
// fixed 2x2 motif in every channel. Every patch carries a log-normal
// per-patch contrast factor (stain intensity): it scales texture and motif
// alike, so within-patch separability is contrast-invariant while feature
// magnitudes are not. Deterministic draw order: contrast first, then pixels
// channel-major, row-major.
Tensor<float> base_patch(Rng& rng, const CorpusSpec& spec, int cls) {
    const float s = static_cast<float>(std::exp(rng.gaussian(0.0, spec.contrast_sigma)));
    Tensor<float> t = Tensor<float>::zeros({3, spec.height, spec.width});
    for (auto& x : t.data) x = s * static_cast<float>(rng.gaussian(0.0, spec.noise_sigma));
    if (cls == 1) {
        const int r0 = std::min(2, spec.height - 1), r1 = std::min(3, spec.height - 1);
        const int c0 = std::min(2, spec.width - 1), c1 = std::min(3, spec.width - 1);
        for (int c = 0; c < 3; ++c)
            for (int y = r0; y <= r1; ++y)
                for (int x = c0; x <= c1; ++x)
                    t.data[(static_cast<std::size_t>(c) * spec.height + y) * spec.width + x] +=
                        s * static_cast<float>(spec.delta);
    }
    return t;
}

void apply_shift(Tensor<float>& patch, const CorpusSpec& spec) {
    const int hw = spec.height * spec.width;
    for (int c = 0; c < 3; ++c) {
        const float g = static_cast<float>(spec.shift_gain[c]);
        const float o = static_cast<float>(spec.shift_offset[c]);
        for (int i = 0; i < hw; ++i) {
            float& v = patch.data[static_cast<std::size_t>(c) * hw + i];
            v = std::clamp(g * v + o, -kClamp, kClamp);
        }
    }
}

std::vector<PatchBag> gen_split(const CorpusSpec& spec, const std::string& split, int n_bags) {
    Rng rng(spec.seed, "data.target." + split);
    std::vector<PatchBag> bags;
    bags.reserve(n_bags);
    const int n = spec.patches_per_bag;
    const int n_pos = static_cast<int>(std::lround(spec.rho * n));
    for (int b = 0; b < n_bags; ++b) {
        PatchBag bag;
        char id[32];
        std::snprintf(id, sizeof(id), "%s-%03d", split.c_str(), b);
        bag.bag_id = id;
        bag.label = b % 2;
        bag.instance_truth.assign(n, 0);
        if (bag.label == 1) {
            const auto perm = rng.permutation(n);
            for (int i = 0; i < n_pos; ++i) bag.instance_truth[perm[i]] = 1;
        }
        bag.patches.reserve(n);
        for (int i = 0; i < n; ++i) {
            Tensor<float> p = base_patch(rng, spec, bag.instance_truth[i]);
            apply_shift(p, spec);
            bag.patches.push_back(std::move(p));
        }
        bags.push_back(std::move(bag));
    }
    return bags;
}

void write_u32(std::ofstream& f, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::ifstream& f, const fs::path& file) {
    unsigned char b[4];
    if (!f.read(reinterpret_cast<char*>(b), 4))
        throw FormatError("truncated blob: " + file.string());
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

std::vector<SourcePatch> gen_source_patches(const CorpusSpec& spec, int n) {
    if (n % 2 != 0) throw ContractError("gen_source_patches: n must be even");
    Rng rng(spec.seed, "data.source");
    std::vector<SourcePatch> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        SourcePatch p;
        p.label = i % 2;
        p.patch = base_patch(rng, spec, p.label);  // no domain shift on the source side
        out.push_back(std::move(p));
    }
    return out;
}

Corpus gen_corpus(const CorpusSpec& spec) {
    spec.validate();
    Corpus c;
    c.spec = spec;
    c.source = gen_source_patches(spec, spec.num_source_patches);
    c.train = gen_split(spec, "train", spec.num_train_bags);
    c.val = gen_split(spec, "val", spec.num_val_bags);
    c.test = gen_split(spec, "test", spec.num_test_bags);
    return c;
}

void write_patch_blob(const fs::path& file, const std::vector<Tensor<float>>& patches) {
    std::ofstream f(file, std::ios::binary);
    if (!f) throw FormatError("cannot open for write: " + file.string());
    f.write(kBagMagic, 8);
    const auto& shape = patches.empty() ? std::vector<int>{3, 0, 0} : patches[0].shape;
    write_u32(f, static_cast<std::uint32_t>(patches.size()));
    write_u32(f, static_cast<std::uint32_t>(shape[0]));
    write_u32(f, static_cast<std::uint32_t>(shape.size() > 1 ? shape[1] : 0));
    write_u32(f, static_cast<std::uint32_t>(shape.size() > 2 ? shape[2] : 0));
    static_assert(sizeof(float) == 4);
    for (const auto& p : patches)
        f.write(reinterpret_cast<const char*>(p.data.data()),
                static_cast<std::streamsize>(p.data.size() * 4));
    if (!f) throw FormatError("write failed: " + file.string());
}

std::vector<Tensor<float>> read_patch_blob(const fs::path& file) {
    std::ifstream f(file, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + file.string());
    char magic[8];
    if (!f.read(magic, 8) || std::memcmp(magic, kBagMagic, 8) != 0)
        throw FormatError("bad magic in " + file.string());
    const std::uint32_t count = read_u32(f, file);
    const std::uint32_t c = read_u32(f, file);
    const std::uint32_t h = read_u32(f, file);
    const std::uint32_t w = read_u32(f, file);
    std::vector<Tensor<float>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Tensor<float> t = Tensor<float>::zeros(
            {static_cast<int>(c), static_cast<int>(h), static_cast<int>(w)});
        if (!f.read(reinterpret_cast<char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * 4)))
            throw FormatError("truncated blob: " + file.string());
        out.push_back(std::move(t));
    }
    return out;
}

std::string corpus_spec_to_json(const CorpusSpec& s) {
    ordered_json j;
    j["num_train_bags"] = s.num_train_bags;
    j["num_val_bags"] = s.num_val_bags;
    j["num_test_bags"] = s.num_test_bags;
    j["patches_per_bag"] = s.patches_per_bag;
    j["num_source_patches"] = s.num_source_patches;
    j["rho"] = s.rho;
    j["height"] = s.height;
    j["width"] = s.width;
    j["delta"] = s.delta;
    j["noise_sigma"] = s.noise_sigma;
    j["contrast_sigma"] = s.contrast_sigma;
    j["shift_gain"] = s.shift_gain;
    j["shift_offset"] = s.shift_offset;
    j["seed"] = s.seed;
    return j.dump(2);
}

namespace {
CorpusSpec spec_from_json(const ordered_json& j) {
    CorpusSpec s;
    s.num_train_bags = j.value("num_train_bags", s.num_train_bags);
    s.num_val_bags = j.value("num_val_bags", s.num_val_bags);
    s.num_test_bags = j.value("num_test_bags", s.num_test_bags);
    s.patches_per_bag = j.value("patches_per_bag", s.patches_per_bag);
    s.num_source_patches = j.value("num_source_patches", s.num_source_patches);
    s.rho = j.value("rho", s.rho);
    s.height = j.value("height", s.height);
    s.width = j.value("width", s.width);
    s.delta = j.value("delta", s.delta);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.contrast_sigma = j.value("contrast_sigma", s.contrast_sigma);
    if (j.contains("shift_gain")) s.shift_gain = j.at("shift_gain").get<std::array<double, 3>>();
    if (j.contains("shift_offset"))
        s.shift_offset = j.at("shift_offset").get<std::array<double, 3>>();
    s.seed = j.value("seed", s.seed);
    return s;
}
}  // namespace

CorpusSpec corpus_spec_from_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open spec file: " + path.string());
    ordered_json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad JSON in " + path.string() + ": " + e.what());
    }
    return spec_from_json(j);
}

void write_corpus(const Corpus& corpus, const fs::path& dir) {
    fs::create_directories(dir / "bags");
    fs::create_directories(dir / "truth");
    fs::create_directories(dir / "source");

    ordered_json manifest;
    manifest["format_version"] = 1;
    manifest["spec"] = ordered_json::parse(corpus_spec_to_json(corpus.spec));
    ordered_json splits;
    auto emit_split = [&](const std::string& name, const std::vector<PatchBag>& bags) {
        ordered_json arr = ordered_json::array();
        for (const auto& bag : bags) {
            const std::string file = "bags/" + bag.bag_id + ".bin";
            write_patch_blob(dir / file, bag.patches);
            ordered_json truth;
            truth["bag_id"] = bag.bag_id;
            truth["instance_truth"] = bag.instance_truth;
            std::ofstream tf(dir / "truth" / (bag.bag_id + ".json"));
            tf << truth.dump(2) << "\n";
            ordered_json rec;
            rec["bag_id"] = bag.bag_id;
            rec["label"] = bag.label;
            rec["num_patches"] = bag.patches.size();
            rec["file"] = file;
            arr.push_back(std::move(rec));
        }
        splits[name] = std::move(arr);
    };
    emit_split("train", corpus.train);
    emit_split("val", corpus.val);
    emit_split("test", corpus.test);
    manifest["splits"] = std::move(splits);

    std::vector<Tensor<float>> src;
    std::vector<int> src_labels;
    for (const auto& p : corpus.source) {
        src.push_back(p.patch);
        src_labels.push_back(p.label);
    }
    write_patch_blob(dir / "source" / "patches.bin", src);
    ordered_json source;
    source["count"] = src.size();
    source["file"] = "source/patches.bin";
    source["labels"] = src_labels;
    manifest["source"] = std::move(source);

    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw FormatError("cannot write manifest in " + dir.string());
    mf << manifest.dump(2) << "\n";
}

Corpus read_corpus(const fs::path& dir, bool load_truth) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw FormatError("missing manifest.json in " + dir.string());
    ordered_json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad manifest in " + dir.string() + ": " + e.what());
    }
    if (manifest.value("format_version", 0) != 1)
        throw FormatError("unsupported corpus format_version in " + dir.string());
    Corpus c;
    c.spec = spec_from_json(manifest.at("spec"));
    auto load_split = [&](const std::string& name, std::vector<PatchBag>& out) {
        for (const auto& rec : manifest.at("splits").at(name)) {
            PatchBag bag;
            bag.bag_id = rec.at("bag_id").get<std::string>();
            bag.label = rec.at("label").get<int>();
            bag.patches = read_patch_blob(dir / rec.at("file").get<std::string>());
            if (bag.patches.size() != rec.at("num_patches").get<std::size_t>())
                throw FormatError("patch count mismatch for bag " + bag.bag_id);
            if (load_truth) {
                std::ifstream tf(dir / "truth" / (bag.bag_id + ".json"));
                if (!tf) throw FormatError("missing truth sidecar for bag " + bag.bag_id);
                ordered_json tj;
                tf >> tj;
                bag.instance_truth = tj.at("instance_truth").get<std::vector<std::uint8_t>>();
            }
            out.push_back(std::move(bag));
        }
    };
    load_split("train", c.train);
    load_split("val", c.val);
    load_split("test", c.test);
    const auto& source = manifest.at("source");
    auto patches = read_patch_blob(dir / source.at("file").get<std::string>());
    auto labels = source.at("labels").get<std::vector<int>>();
    if (patches.size() != labels.size())
        throw FormatError("source label count mismatch in " + dir.string());
    for (std::size_t i = 0; i < patches.size(); ++i)
        c.source.push_back(SourcePatch{std::move(patches[i]), labels[i]});
    return c;
}

}  // namespace pmil
