#pragma once

#include <cstdint>
#include <string>

#include "bsr/compress.hpp"
#include "bsr/nn.hpp"
#include "bsr/types.hpp"

namespace bsr::persist {

// Pipeline stage tags accepted in checkpoint manifests.
bool valid_stage(const std::string & stage);

struct ModelMeta {
    std::string stage = "trained";
    uint64_t seed = 0;
    uint64_t dataset_fingerprint = 0;
};

// Every save writes a directory holding a canonical manifest.json (plus one
// little-endian float32 row-major blob per parameter tensor for models),
// staged in a temp directory and renamed into place.
void save_model(const nn::Model & model, const ModelMeta & meta, const std::string & path);
nn::Model load_model(const std::string & path, ModelMeta * meta = nullptr);

void save_ranks(const RankVector & ranks, const std::string & path);
RankVector load_ranks(const std::string & path);

void save_report(const compress::CompressionReport & rep, const std::string & path);
compress::CompressionReport load_report(const std::string & path);

// "model", "ranks" or "report"; FormatError when the manifest is unreadable.
std::string checkpoint_kind(const std::string & path);

} // namespace bsr::persist
