#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "fulora/tensor.hpp"

namespace fulora {

/// A named, optionally trainable leaf tensor. Frozen params never receive
/// gradients and are never touched by optimizers.
class Param {
 public:
  Param(std::string name, Tensor value, bool trainable);

  const std::string& name() const { return name_; }
  const Tensor& value() const { return value_; }
  Tensor& value() { return value_; }
  bool trainable() const { return trainable_; }
  void set_trainable(bool on);

  /// Gradient view (zeros when nothing flowed since the last zero_grad).
  Tensor grad() const { return value_.grad(); }
  bool has_grad() const { return value_.has_grad(); }
  void zero_grad() { value_.zero_grad(); }

 private:
  std::string name_;
  Tensor value_;
  bool trainable_;
};

/// Ordered collection of params with lookup by stable name.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Param& add(const std::string& name, Tensor value, bool trainable = true);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  Param* find(const std::string& name);
  const Param* find(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  std::vector<Param*> all();
  std::vector<const Param*> all() const;
  std::vector<Param*> trainable();
  std::vector<std::string> names() const;
  std::int64_t count_elements(bool trainable_only = false) const;

  void zero_grad();
  void freeze_all();
  /// FNV-1a over names and raw bytes of every param value.
  std::uint64_t checksum() const;
  /// Deep copy of names, values and trainable flags.
  ParamStore clone() const;

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fulora
