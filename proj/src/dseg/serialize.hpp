#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dseg/tensor.hpp"

#include "json.hpp"

namespace dseg {

// Binary tensor blob: little-endian "DSEG" magic, u32 version, four u64
// extents (n, c, h, w), u8 dtype tag (0 = f32, 1 = f64), then raw scalars.
// Weight files and activation dumps embed these blobs.

std::vector<uint8_t> tensor_to_bytes(const TensorF& t);
std::vector<uint8_t> tensor_to_bytes(const TensorD& t);
TensorF tensor_f32_from_bytes(const std::vector<uint8_t>& bytes);
TensorD tensor_f64_from_bytes(const std::vector<uint8_t>& bytes);

void write_tensor_file(const std::string& path, const TensorF& t);
TensorF read_tensor_file_f32(const std::string& path);

// Named-entry container ("DSGC"): u32 version, u64 manifest length, manifest
// JSON, then entry payloads back to back. The manifest records name, kind
// ("tensor" or "json"), offset and size for every entry. Checkpoints and
// weight files are containers.
class Container {
 public:
  void put_tensor(const std::string& name, const TensorF& t);
  void put_json(const std::string& name, const nlohmann::json& j);

  bool has(const std::string& name) const;
  std::vector<std::string> names() const;
  TensorF get_tensor(const std::string& name) const;
  nlohmann::json get_json(const std::string& name) const;

  void save(const std::string& path) const;
  static Container load(const std::string& path);

 private:
  struct Entry {
    std::string kind;
    std::vector<uint8_t> bytes;
  };
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
};

}  // namespace dseg
