#pragma once

// Checkpoint persistence: one flat little-endian float32 blob holding every
// parameter back to back (`<stem>.bin`), plus a JSON manifest
// (`<stem>.json`) listing name, shape and byte offset per parameter along
// with caller-supplied metadata.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vrpo/tensor.hpp"

namespace vrpo {

void save_checkpoint(const std::string& stem, const NamedTensors& params,
                     const std::map<std::string, std::string>& meta = {});

// Loads values into the given (already shaped) tensors. Throws CompatError
// on missing names or shape mismatch, IoError on file trouble.
void load_checkpoint(const std::string& stem, NamedTensors& params);

// Reads only the manifest metadata.
std::map<std::string, std::string> read_checkpoint_meta(const std::string& stem);

}  // namespace vrpo
