#pragma once

#include <string>
#include <utility>
#include <vector>

#include "captlab/model.hpp"
#include "captlab/prompts.hpp"
#include "captlab/tensor.hpp"

namespace captlab {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Container layout, all integers little-endian:
//   "CAPT" | u32 version | u32 count |
//   count x ( u32 name_bytes | UTF-8 name | u32 rank | rank x u64 dim | f64 values )
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const NamedTensors& tensors);
NamedTensors decode_checkpoint(const std::string& bytes);

void write_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors read_checkpoint(const std::string& path);

/// Git blob id of the bytes: sha1("blob <n>\0" + bytes), lowercase hex.
std::string git_blob_hash(const std::string& bytes);

/// Backbone tensors followed by strategy parameters.
void save_model(const std::string& path, const Model& model, const PromptStrategy& strategy);

/// Copies values by name into already-shaped tensors. Names missing from the
/// file or shape mismatches raise IoError.
void load_model(const std::string& path, Model& model, PromptStrategy& strategy);

}  // namespace captlab
