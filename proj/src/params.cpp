#include "taylorseg/params.hpp"

#include "taylorseg/errors.hpp"

namespace taylorseg {

const char* to_string(ParamGroup group) {
  return group == ParamGroup::Backbone ? "backbone" : "app";
}

Tensor& ParamStore::add(std::string name, ParamGroup group, Tensor value) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{std::move(name), group, std::move(value)});
  return entries_.back().value;
}

bool ParamStore::contains(const std::string& name) const { return index_.contains(name); }

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second];
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].value;
}

const Tensor& ParamStore::get(const std::string& name) const { return entry(name).value; }

std::size_t ParamStore::scalar_count() const {
  std::size_t total = 0;
  for (const Entry& e : entries_) total += e.value.size();
  return total;
}

std::vector<std::string> ParamStore::names(ParamGroup group) const {
  std::vector<std::string> out;
  for (const Entry& e : entries_) {
    if (e.group == group) out.push_back(e.name);
  }
  return out;
}

Var TapeParams::operator[](const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = tape_.parameter(store_.get(name));
  bound_.emplace(name, v);
  return v;
}

GradMap TapeParams::gradients() const {
  GradMap out;
  for (const auto& e : store_.entries()) {
    auto it = bound_.find(e.name);
    out.emplace(e.name, it == bound_.end() ? Tensor(e.value.shape(), 0.0) : it->second.grad());
  }
  return out;
}

}  // namespace taylorseg
