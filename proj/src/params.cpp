#include "cpseg/params.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cpseg/cpmt.hpp"

namespace cpseg {

Tensor& ParamStore::add(const std::string& name, Tensor value, bool trainable) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  value.set_requires_grad(trainable);
  index_[name] = entries_.size();
  entries_.push_back({name, std::move(value), trainable});
  return entries_.back().value;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].value;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].value;
}

std::vector<Tensor*> ParamStore::trainable() {
  std::vector<Tensor*> out;
  for (auto& e : entries_) {
    if (e.trainable) out.push_back(&e.value);
  }
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += static_cast<std::size_t>(e.value.numel());
  }
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

void ParamStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    const std::string file = "p" + std::to_string(i) + ".cpmt";
    save_tensor(dir / file, e.value);
    manifest.push_back({{"name", e.name},
                        {"file", file},
                        {"shape", e.value.shape()},
                        {"dtype", e.value.dtype() == DType::f32 ? "f32" : "f64"},
                        {"trainable", e.trainable}});
  }
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
}

void ParamStore::load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("missing parameter manifest: " + (dir / "manifest.json").string());
  const auto manifest = nlohmann::json::parse(is);
  for (const auto& item : manifest) {
    const auto name = item.at("name").get<std::string>();
    Tensor& dst = get(name);
    Tensor src = load_tensor(dir / item.at("file").get<std::string>());
    if (src.shape() != dst.shape() || src.dtype() != dst.dtype()) {
      throw std::runtime_error("parameter " + name + ": stored shape " + to_string(src.shape()) +
                               " does not match " + to_string(dst.shape()));
    }
    dst.mutable_buffer() = src.buffer();
  }
}

Tensor normal_tensor(Rng& rng, const Shape& shape, double stddev, DType dtype) {
  Buffer b(dtype, static_cast<std::size_t>(numel_of(shape)));
  for (std::size_t i = 0; i < b.size(); ++i) b.set(i, rng.normal(0.0, stddev));
  return Tensor::from_buffer(shape, std::move(b));
}

Tensor he_normal(Rng& rng, const Shape& shape, DType dtype) {
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  return normal_tensor(rng, shape, std::sqrt(2.0 / static_cast<double>(fan_in)), dtype);
}

}  // namespace cpseg
