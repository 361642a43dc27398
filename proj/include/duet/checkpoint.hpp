#pragma once

// DUET checkpoint files: "DUET", u32 version, u32 tensor count, then per
// tensor a u32 name length, the name, u32 rank, u64 dims and little-endian
// f32 values. Models also carry a "meta.model_config" tensor so they can be
// rebuilt without a separate config file.

#include <string>
#include <utility>
#include <vector>

#include "duet/autodiff.hpp"
#include "duet/model.hpp"

namespace duet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensor = std::pair<std::string, ad::Tensor<float>>;

void write_tensors(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(const std::string& path);

void save_model(const std::string& path, const Model<float>& model);
// Rebuilds the model from the stored configuration.
Model<float> load_model(const std::string& path);
// Overwrites `model` in place; every stored tensor must match by name and shape.
void load_into(const std::string& path, Model<float>& model);

}  // namespace duet
