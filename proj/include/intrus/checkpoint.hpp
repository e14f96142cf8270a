#pragma once

#include <map>
#include <string>
#include <vector>

#include "intrus/autograd.hpp"

namespace intrus {

// Checkpoint file layout (all header lines are '\n'-terminated ASCII):
//
//   INTRUS-CHECKPOINT 1
//   meta <key>=<value>                 zero or more, sorted by key
//   tensor <name> <rows> <cols> <offset>   one per parameter, in set order
//   payload <bytes>
//   <payload: float32 little-endian, row-major, tensors concatenated>
//
// <offset> is the byte offset of a tensor's first value from the start of
// the payload.
struct CheckpointTensor {
  std::string name;
  Matrix value;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<CheckpointTensor> tensors;
};

void write_checkpoint(const std::string& path, const ParameterSet& params,
                      const std::map<std::string, std::string>& meta);
Checkpoint read_checkpoint(const std::string& path);

// Copies tensors into an existing set by name. Every parameter must be
// present with a matching shape.
void load_parameters(const Checkpoint& ckpt, ParameterSet& params);

}  // namespace intrus
