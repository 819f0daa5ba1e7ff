#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dcn/tensor.hpp"

namespace dcn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Single-file checkpoint: magic, canonical JSON manifest, then raw
/// little-endian f64 blobs in manifest order. save -> load -> save is
/// byte-identical by construction.
struct Checkpoint {
  std::int32_t version = 1;
  std::string config_json;      // canonical RunConfig echo
  std::int64_t iteration = 0;
  std::string rng_state;        // decimal u64
  std::vector<std::pair<std::string, Tensor>> arrays;  // ordered

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dcn
