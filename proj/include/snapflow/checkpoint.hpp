#pragma once

#include "snapflow/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace snapflow {

inline constexpr int kCheckpointFormatVersion = 1;

// Ordered name -> parameter registry. Names are dotted paths such as
// "vae.encoder.hidden.weight".
class ParameterSet {
 public:
  void add(std::string name, Tensor tensor);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  // All tensors whose name starts with `prefix`, in insertion order.
  std::vector<Tensor> tensors(std::string_view prefix = {}) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// {"format_version": 1, "params": {name: {"shape": [r, c], "values": [...]}}}
nlohmann::json params_to_json(const ParameterSet& params);

// Overwrites values in place. Every registered name must be present with a
// matching shape.
void params_from_json(const ParameterSet& params, const nlohmann::json& doc);

void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace snapflow
