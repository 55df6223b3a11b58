#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "layerfuse/errors.hpp"

namespace layerfuse {

// One named f32 tensor inside a container file. Values are held as floats:
// the file is the source of truth and all round-trips are bit-exact.
struct StoredTensor {
  std::vector<std::size_t> shape;
  std::vector<float> values;

  [[nodiscard]] std::size_t element_count() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }
};

// Tensor container file:
//   bytes 0..7   little-endian u64 header length n
//   bytes 8..8+n UTF-8 JSON: tensor name -> {"dtype","shape","offsets"}
//                plus a "__meta__" object
//   remainder    concatenated raw little-endian f32 data; offsets are
//                [begin,end) byte positions relative to the data section
//
// Tensors are packed in lexicographic name order so identical content always
// produces identical bytes.
class TensorStore {
 public:
  void put(const std::string& name, std::vector<std::size_t> shape,
           std::vector<float> values);
  void put_f64(const std::string& name, std::vector<std::size_t> shape,
               const std::vector<double>& values);

  [[nodiscard]] bool contains(const std::string& name) const;
  [[nodiscard]] const StoredTensor& get(const std::string& name) const;
  [[nodiscard]] std::vector<double> get_f64(const std::string& name) const;
  [[nodiscard]] std::vector<std::string> names() const;

  nlohmann::json& meta() { return meta_; }
  [[nodiscard]] const nlohmann::json& meta() const { return meta_; }

  // Atomic save (temp file + rename).
  void save(const std::string& path) const;
  static TensorStore load(const std::string& path);

 private:
  std::map<std::string, StoredTensor> tensors_;
  nlohmann::json meta_ = nlohmann::json::object();
};

}  // namespace layerfuse
