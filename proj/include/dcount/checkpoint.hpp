#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcount/nn.hpp"

namespace dcount {

// Binary checkpoint: magic, JSON header, then named float tensors.
// Writes go to a temporary sibling and are renamed into place.
void write_checkpoint(const std::filesystem::path& path,
                      const nlohmann::json& header,
                      const std::vector<nn::Param*>& params);

// Reads the header only.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

// Loads tensors into params by name. With allow_partial, params missing from
// the file keep their values and unknown tensors are ignored; otherwise any
// mismatch is an error. Returns the header.
nlohmann::json read_checkpoint(const std::filesystem::path& path,
                               const std::vector<nn::Param*>& params,
                               bool allow_partial = false);

// SHA-256 over parameter names, shapes and values.
std::string params_hash(const std::vector<nn::Param*>& params);

// Writes text to path via temp file + rename.
void write_file_atomic(const std::filesystem::path& path,
                       const std::string& contents);

}  // namespace dcount
