#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cgfr/optim.hpp"
#include "cgfr/tensor.hpp"

namespace cgfr {

/// Checkpoint container: named tensors in file order.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Serializes entries to the CGFR checkpoint format: magic "CGFR", format
/// version u32 LE, tensor count u32 LE, then per tensor a u16 name length,
/// the UTF-8 name, a u8 rank, u32 dims and the f64 LE payload. The file is
/// written to a temp path and renamed so that interrupted runs never leave a
/// partial checkpoint behind.
void save_checkpoint(const std::string& path, const NamedTensors& entries);

/// Convenience: parameters (insertion order) followed by buffers.
void save_checkpoint(const std::string& path, ParamStore& store);

/// Reads a checkpoint; rejects unknown magic or version with IoError.
NamedTensors load_checkpoint(const std::string& path);

/// Loads values into a store by name. Every entry in the file must resolve to
/// a parameter or buffer of identical shape; when `exhaustive` is set, every
/// parameter/buffer in the store must also be present in the file.
void load_checkpoint_into(const std::string& path, ParamStore& store, bool exhaustive);

}  // namespace cgfr
