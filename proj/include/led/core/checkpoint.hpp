#pragma once

#include <filesystem>
#include <string>

#include "led/core/nn.hpp"
#include "led/core/tensor.hpp"

namespace led {

// Single-tensor file: "LEDT", u32 version (1), u32 rank, u64 extents[rank],
// f32 payload, all little-endian.
void write_tensor_file(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor_file(const std::filesystem::path& path);

// Writes one file per parameter into `dir` and merges the entries into
// `dir/manifest.txt` (lines: "<name> <file> <d0>x<d1>...").
void save_checkpoint(const std::filesystem::path& dir, const ParamList& params);

// Overwrites each parameter's values from `dir`. Missing names or shape
// mismatches raise UsageError.
void load_checkpoint(const std::filesystem::path& dir, const ParamList& params);

bool checkpoint_has(const std::filesystem::path& dir, const std::string& name);

// Rounds values to the nearest f32, matching what a save/load cycle yields.
void quantize_like_checkpoint(const ParamList& params);

}  // namespace led
