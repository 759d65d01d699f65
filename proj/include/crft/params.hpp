#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "crft/io.hpp"
#include "crft/tensor.hpp"

namespace crft {

// Named learnable tensors, iterated in registration order.
//
// On disk: <dir>/manifest.json {"tensors": [{"name", "file", "shape"}...]}
// plus one CRT1 file per tensor.
class ParamStore {
 public:
  // Registers a leaf that requires grad. Throws ConfigError on duplicates.
  Tensor& add(const std::string& name, Tensor value);
  Tensor& add_uniform(const std::string& name, Shape shape, std::size_t fan_in, std::mt19937_64& rng);
  Tensor& add_zeros(const std::string& name, Shape shape);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);

  const std::vector<std::string>& names() const { return order_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }
  std::size_t element_count() const;

  void zero_grad();
  // Rounds every value to the nearest float32 so that a CRT1 save/load is
  // lossless for the values held afterwards.
  void round_to_f32();
  // Deep copy with fresh storage.
  ParamStore clone() const;

  void save(const fs::path& dir) const;
  static ParamStore load(const fs::path& dir);

 private:
  std::vector<std::string> order_;
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace crft
