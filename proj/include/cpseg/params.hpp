#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cpseg/rng.hpp"
#include "cpseg/tensor.hpp"

namespace cpseg {

// Ordered collection of named tensors. Trainable entries are optimized;
// the rest are buffers such as batch-norm running statistics.
class ParamStore {
public:
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable = true;
  };

  Tensor& add(const std::string& name, Tensor value, bool trainable = true);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Tensor*> trainable();
  std::size_t parameter_count() const;

  void zero_grad();

  // Writes manifest.json plus one CPMT file per entry into `dir`.
  void save(const std::filesystem::path& dir) const;
  // Loads values into existing entries; names, shapes and dtypes must match.
  void load(const std::filesystem::path& dir);

private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// He-normal conv weight (out, in, k, k).
Tensor he_normal(Rng& rng, const Shape& shape, DType dtype);
Tensor normal_tensor(Rng& rng, const Shape& shape, double stddev, DType dtype);

}  // namespace cpseg
