#pragma once

// Synthetic corpus: a labeled source-domain patch set (backbone pretraining)
// and target-domain MIL bags with rare positive instances plus a channel-wise
// domain shift. Everything is a pure function of the CorpusSpec.

#include <filesystem>
#include <vector>

#include "pmil/data.hpp"

namespace pmil {

std::vector<SourcePatch> gen_source_patches(const CorpusSpec& spec, int n);

/// Fills train/val/test bags AND the source patch set.
Corpus gen_corpus(const CorpusSpec& spec);

/// Directory layout: manifest.json, bags/<id>.bin, truth/<id>.json,
/// source/patches.bin. Truth sidecars are only read when load_truth is set.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir, bool load_truth = false);

CorpusSpec corpus_spec_from_json_file(const std::filesystem::path& path);
std::string corpus_spec_to_json(const CorpusSpec& spec);

// Raw patch-blob format shared by bags and the source set.
void write_patch_blob(const std::filesystem::path& file,
                      const std::vector<Tensor<float>>& patches);
std::vector<Tensor<float>> read_patch_blob(const std::filesystem::path& file);

}  // namespace pmil
