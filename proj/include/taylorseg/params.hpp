#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "taylorseg/autodiff.hpp"
#include "taylorseg/tensor.hpp"

namespace taylorseg {

// Parameter groups updated on alternating iterations during training.
enum class ParamGroup { Backbone, App };

const char* to_string(ParamGroup group);

// Named learnable tensors in registration order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ParamGroup group;
    Tensor value;
  };

  // Throws ConfigError on a duplicate name.
  Tensor& add(std::string name, ParamGroup group, Tensor value);

  bool contains(const std::string& name) const;
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  const Entry& entry(const std::string& name) const;

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& entries() noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  // Total scalar count across every tensor.
  std::size_t scalar_count() const;
  std::vector<std::string> names(ParamGroup group) const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using GradMap = std::map<std::string, Tensor>;

// Lazily binds store entries as tape parameters for one forward pass.
class TapeParams {
 public:
  TapeParams(Tape& tape, const ParamStore& store) : tape_(tape), store_(store) {}

  Var operator[](const std::string& name);
  bool contains(const std::string& name) const { return store_.contains(name); }
  Tape& tape() noexcept { return tape_; }

  // Gradient for every entry in the store; zero for parameters the forward
  // pass never touched. Call after Tape::backward.
  GradMap gradients() const;

 private:
  Tape& tape_;
  const ParamStore& store_;
  std::unordered_map<std::string, Var> bound_;
};

}  // namespace taylorseg
