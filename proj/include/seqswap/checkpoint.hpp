#pragma once

// Checkpoint files: one JSON header line holding the model config and a
// manifest of {name, shape, offset}, followed by the parameters as
// little-endian float64 at the manifest offsets (in elements).

#include <string>

#include "seqswap/model.hpp"

namespace seqswap {

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

std::string checkpoint_bytes(const Model& model);
Model parse_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint");

// Writes to a sibling temporary file and renames it over `path`.
void write_atomic(const std::string& path, const std::string& content);

}  // namespace seqswap
