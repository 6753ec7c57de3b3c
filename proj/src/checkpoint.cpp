#include "snapflow/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace snapflow {

void ParameterSet::add(std::string name, Tensor tensor) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  entries_.emplace_back(std::move(name), std::move(tensor));
}

const Tensor& ParameterSet::at(std::string_view name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw std::out_of_range("unknown parameter: " + std::string(name));
}

bool ParameterSet::contains(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.first == name) return true;
  return false;
}

std::vector<Tensor> ParameterSet::tensors(std::string_view prefix) const {
  std::vector<Tensor> out;
  for (const auto& [n, t] : entries_)
    if (std::string_view(n).starts_with(prefix)) out.push_back(t);
  return out;
}

nlohmann::json params_to_json(const ParameterSet& params) {
  nlohmann::json doc;
  doc["format_version"] = kCheckpointFormatVersion;
  auto& p = doc["params"];
  p = nlohmann::json::object();
  for (const auto& [name, t] : params.entries()) {
    const Matrix& v = t.value();
    p[name] = {{"shape", {v.rows(), v.cols()}},
               {"values", std::vector<double>(v.data(), v.data() + v.size())}};
  }
  return doc;
}

void params_from_json(const ParameterSet& params, const nlohmann::json& doc) {
  if (!doc.contains("format_version") || doc.at("format_version").get<int>() != kCheckpointFormatVersion)
    throw std::runtime_error("checkpoint: unsupported or missing format_version");
  const auto& p = doc.at("params");
  for (const auto& [name, t] : params.entries()) {
    if (!p.contains(name)) throw std::runtime_error("checkpoint: missing parameter " + name);
    const auto& entry = p.at(name);
    const auto shape = entry.at("shape").get<std::vector<Index>>();
    const auto values = entry.at("values").get<std::vector<double>>();
    if (shape.size() != 2 || shape[0] != t.rows() || shape[1] != t.cols() ||
        static_cast<Index>(values.size()) != t.size())
      throw ShapeError("checkpoint load " + name, t.rows(), t.cols(), shape.empty() ? 0 : shape[0],
                       shape.size() < 2 ? 0 : shape[1]);
    Tensor handle = t;
    handle.mutable_value() = Eigen::Map<const Matrix>(values.data(), t.rows(), t.cols());
  }
}

void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& doc) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << doc.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace snapflow
