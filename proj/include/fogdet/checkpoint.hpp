#pragma once

// Binary key -> tensor container.
//
//   "FOGDETCK"                      8-byte magic
//   u32 version                     kCheckpointVersion
//   u32 n_meta, then n_meta x (str key, str value)
//   u32 n_tensors, then n_tensors x (str name, u32 ndim, i32 dims[ndim], f64 values[numel])
//
// str is u32 length + bytes. Integers and doubles are little-endian.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fogdet/nn.hpp"
#include "fogdet/tensor.hpp"

namespace fogdet {

inline constexpr unsigned kCheckpointVersion = 1;

struct Checkpoint {
	std::map<std::string, std::string> metadata;
	std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws ConfigError when the file is missing and ParseError when it is malformed.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of a module's parameters under `prefix`.
void capture(Checkpoint& ckpt, const nn::Module& module, const std::string& prefix = "");

struct LoadReport {
	std::vector<std::string> loaded;
	std::vector<std::string> missing;    // wanted by the module, absent in the file
	std::vector<std::string> unexpected; // in the file under `prefix`, unknown to the module
};

/// Copies matching tensors into the module. Shape mismatches always throw; with
/// `strict`, missing keys throw as well. Keys outside `prefix` are ignored.
LoadReport restore(const Checkpoint& ckpt, const nn::Module& module, const std::string& prefix = "", bool strict = true);

/// Removes every tensor whose key starts with `prefix`; returns the count removed.
std::size_t strip_prefix(Checkpoint& ckpt, const std::string& prefix);

} // namespace fogdet
