#pragma once

#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "controlvae/optim.hpp"
#include "controlvae/tensor.hpp"

CONTROLVAE_NAMESPACE_BEGIN

// File layout:
//   8 bytes   magic "CVAECKP1"
//   8 bytes   header length N, unsigned little-endian
//   N bytes   JSON header: tensor names, shapes and payload offsets (in
//             reals), optional optimizer block, free-form "meta" object
//   rest      float32 little-endian payload: parameters in declaration
//             order, then optimizer first moments, then second moments
struct Checkpoint {
  struct Entry {
    std::string name;
    Tensor value;
  };
  std::vector<Entry> tensors;
  std::optional<RAdamState> optimizer;
  nlohmann::json meta = nlohmann::json::object();

  const Entry* find(const std::string& name) const;
};

Checkpoint make_checkpoint(const ParameterList& params, const RAdam* opt = nullptr,
                           nlohmann::json meta = nlohmann::json::object());
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

void save_checkpoint(const std::string& path, const ParameterList& params,
                     const RAdam* opt = nullptr,
                     nlohmann::json meta = nlohmann::json::object());
// Copies stored values into `params` by name (every parameter must be
// present with a matching shape) and restores the optimizer if given.
void load_checkpoint(const std::string& path, const ParameterList& params,
                     RAdam* opt = nullptr, nlohmann::json* meta = nullptr);
void apply_checkpoint(const Checkpoint& ckpt, const ParameterList& params,
                      RAdam* opt = nullptr);

// Hash of a file's bytes (FNV-1a, hex string).
std::string file_hash(const std::string& path);

CONTROLVAE_NAMESPACE_END
