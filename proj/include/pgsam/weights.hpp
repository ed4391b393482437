#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace pgsam::weights {

// A tensor bundle is two files sharing a stem:
//   <stem>.manifest  text; first line "pgsam-tensors 1", then one line per tensor
//                    "<key> <d0>x<d1>x..." ("scalar" for rank 0), in payload order
//   <stem>.bin       concatenated little-endian float32 payloads
using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

void write_bundle(const std::filesystem::path& stem, const NamedTensors& tensors);
NamedTensors read_bundle(const std::filesystem::path& stem);

/// Shape table only, as declared by the manifest.
std::vector<std::pair<std::string, std::vector<int64_t>>> read_manifest(const std::filesystem::path& stem);

}  // namespace pgsam::weights
