#pragma once

// Binary checkpoints:
//   "TRCK" | u32 version | u64 meta length | meta JSON |
//   u32 tensor count | per tensor: u32 name length, name, u32 rank, i32 dims, f64 values
// The meta JSON holds the model config under "model" plus free-form fields.

#include <filesystem>
#include <memory>
#include <string>

#include "transrad/detmodel.hpp"

namespace transrad {

void save_checkpoint(const std::filesystem::path& file, const Detector& model, const std::string& extra_json = "{}");

struct LoadedCheckpoint {
  std::unique_ptr<Detector> model;
  std::string extra_json;
};

// Rebuilds the model from the stored config and restores every tensor,
// checking names and shapes. Malformed files raise DataError.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& file);

// Copies tensor values between models of identical layout.
void copy_weights(const Detector& from, Detector& to);

}  // namespace transrad
