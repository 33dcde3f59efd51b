#pragma once

// Checkpoint file: magic "PMILCKPT1", a text meta block (key = value lines),
// a text index (name, trainable flag, shape, byte offset into the payload),
// then raw little-endian f32 data.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "pmil/backbone.hpp"
#include "pmil/params.hpp"

namespace pmil {

struct Checkpoint {
    std::map<std::string, std::string> meta;  // lexicographic, deterministic bytes
    ParamSet<float> params;

    const std::string& meta_at(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) throw FormatError("checkpoint missing meta key: " + key);
        return it->second;
    }
    std::string meta_or(const std::string& key, const std::string& fallback) const {
        auto it = meta.find(key);
        return it == meta.end() ? fallback : it->second;
    }
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// FNV-1a over the file bytes, as 16 hex digits.
std::string file_fingerprint(const std::filesystem::path& path);

void encode_backbone_config(const BackboneConfig& cfg, std::map<std::string, std::string>& meta);
BackboneConfig decode_backbone_config(const std::map<std::string, std::string>& meta);

}  // namespace pmil
