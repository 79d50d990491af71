#include "fulora/param.hpp"

#include <cstring>
#include <stdexcept>

namespace fulora {

Param::Param(std::string name, Tensor value, bool trainable)
    : name_(std::move(name)), value_(std::move(value)), trainable_(trainable) {
  if (!value_.is_leaf()) throw std::invalid_argument("param '" + name_ + "' must be a leaf tensor");
  value_.set_requires_grad(trainable_);
}

void Param::set_trainable(bool on) {
  trainable_ = on;
  value_.set_requires_grad(on);
  if (!on) value_.zero_grad();
}

Param& ParamStore::add(const std::string& name, Tensor value, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("duplicate param name '" + name + "'");
  index_.emplace(name, params_.size());
  params_.push_back(std::make_unique<Param>(name, std::move(value), trainable));
  return *params_.back();
}

Param& ParamStore::get(const std::string& name) {
  auto* p = find(name);
  if (!p) throw std::out_of_range("unknown param '" + name + "'");
  return *p;
}

const Param& ParamStore::get(const std::string& name) const {
  const auto* p = find(name);
  if (!p) throw std::out_of_range("unknown param '" + name + "'");
  return *p;
}

Param* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

const Param* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

std::vector<Param*> ParamStore::all() {
  std::vector<Param*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Param*> ParamStore::all() const {
  std::vector<const Param*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Param*> ParamStore::trainable() {
  std::vector<Param*> out;
  for (auto& p : params_)
    if (p->trainable()) out.push_back(p.get());
  return out;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->name());
  return out;
}

std::int64_t ParamStore::count_elements(bool trainable_only) const {
  std::int64_t n = 0;
  for (const auto& p : params_)
    if (!trainable_only || p->trainable()) n += p->value().numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

void ParamStore::freeze_all() {
  for (auto& p : params_) p->set_trainable(false);
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix = [&h](const void* bytes, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& p : params_) {
    mix(p->name().data(), p->name().size());
    auto d = p->value().data();
    mix(d.data(), d.size_bytes());
  }
  return h;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& p : params_) out.add(p->name(), p->value().clone(), p->trainable());
  return out;
}

}  // namespace fulora
