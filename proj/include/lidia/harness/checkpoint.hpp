#pragma once

#include <filesystem>

#include "lidia/model/model.hpp"

namespace lidia {

/// Single-archive checkpoint: magic + JSON manifest (model config + named
/// parameter index with offsets) followed by raw little-endian float32 blobs.
void save_checkpoint(const LidiaModel<float>& model, const std::filesystem::path& path);

/// Rebuilds the model from the stored config and loads every parameter.
/// Shape or name disagreements with the stored manifest raise errors naming
/// the mismatched entry.
LidiaModel<float> load_checkpoint(const std::filesystem::path& path);

/// Loads into an existing model; its configuration must match the manifest.
void load_checkpoint_into(LidiaModel<float>& model, const std::filesystem::path& path);

}  // namespace lidia
