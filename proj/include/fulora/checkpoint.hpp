#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fulora/param.hpp"
#include "fulora/tensor.hpp"

namespace fulora {

/// Flat container of named float tensors plus named UTF-8 text documents
/// (JSON metadata such as "model.json" or "lora.json").
///
/// Layout, all integers little-endian:
///   magic "FULORACK" | u32 version | u64 entry count
///   per entry: u32 name length | name bytes | u8 kind
///     kind 0 (tensor): u32 rank | u64 dims[rank] | f32 data[prod(dims)]
///     kind 1 (text):   u64 length | bytes
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void put(const std::string& name, const Tensor& value);
  void put_text(const std::string& name, std::string text);
  bool has(const std::string& name) const;
  bool has_text(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  const std::string& text(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }
  const std::vector<std::pair<std::string, std::string>>& texts() const { return texts_; }

  /// Adds every param value under its name.
  void put_params(const ParamStore& store, const std::string& prefix = "");
  /// Copies stored values into matching params; throws DataError if a param
  /// is missing or its shape differs.
  void load_params(ParamStore& store, const std::string& prefix = "") const;

 private:
  std::vector<std::pair<std::string, Tensor>> tensors_;
  std::vector<std::pair<std::string, std::string>> texts_;
};

/// Writes to a temporary sibling file, then renames over the target.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fulora
