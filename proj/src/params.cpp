#include "crft/params.hpp"

#include <cmath>

#include "crft/error.hpp"

namespace crft {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ConfigError("parameter '" + name + "' registered twice");
  value.set_requires_grad(true);
  index_[name] = tensors_.size();
  order_.push_back(name);
  tensors_.push_back(std::move(value));
  return tensors_.back();
}

Tensor& ParamStore::add_uniform(const std::string& name, Shape shape, std::size_t fan_in,
                                std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return add(name, Tensor(std::move(shape), std::move(v)));
}

Tensor& ParamStore::add_zeros(const std::string& name, Shape shape) {
  return add(name, Tensor(std::move(shape), 0.0));
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return tensors_[it->second];
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return tensors_[it->second];
}

std::size_t ParamStore::element_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

void ParamStore::round_to_f32() {
  for (auto& t : tensors_) round_f32_inplace(t.mutable_values());
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (std::size_t i = 0; i < tensors_.size(); ++i) out.add(order_[i], tensors_[i].detach());
  return out;
}

void ParamStore::save(const fs::path& dir) const {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json manifest;
  manifest["tensors"] = json::array();
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const std::string file = order_[i] + ".crt1";
    write_crt1(dir / file, tensors_[i]);
    manifest["tensors"].push_back({{"name", order_[i]}, {"file", file}, {"shape", tensors_[i].shape()}});
  }
  write_json(dir / "manifest.json", manifest);
}

ParamStore ParamStore::load(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
    throw IoError(dir.string() + "/manifest.json: missing 'tensors' list");
  }
  ParamStore out;
  for (const auto& e : manifest["tensors"]) {
    Tensor t = read_crt1(dir / e.at("file").get<std::string>());
    if (t.shape() != e.at("shape").get<Shape>()) {
      throw IoError(dir.string() + ": shape of '" + e.at("name").get<std::string>() +
                    "' disagrees with manifest");
    }
    out.add(e.at("name").get<std::string>(), std::move(t));
  }
  return out;
}

}  // namespace crft
