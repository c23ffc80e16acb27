#include "dseg/serialize.hpp"

#include <cstring>
#include <fstream>

namespace dseg {

namespace {

constexpr char kTensorMagic[4] = {'D', 'S', 'E', 'G'};
constexpr char kContainerMagic[4] = {'D', 'S', 'G', 'C'};
constexpr uint32_t kVersion = 1;

void append_raw(std::vector<uint8_t>& out, const void* p, size_t n) {
  const auto* b = static_cast<const uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

template <class T>
void append_pod(std::vector<uint8_t>& out, T v) {
  append_raw(out, &v, sizeof(v));
}

template <class T>
T read_pod(const std::vector<uint8_t>& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw IoError("tensor blob truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

template <class T>
std::vector<uint8_t> tensor_bytes_impl(const Tensor<T>& t, uint8_t dtype) {
  std::vector<uint8_t> out;
  out.reserve(4 + 4 + 32 + 1 + static_cast<size_t>(t.size()) * sizeof(T));
  append_raw(out, kTensorMagic, 4);
  append_pod<uint32_t>(out, kVersion);
  const Shape4& s = t.shape();
  append_pod<uint64_t>(out, static_cast<uint64_t>(s.n));
  append_pod<uint64_t>(out, static_cast<uint64_t>(s.c));
  append_pod<uint64_t>(out, static_cast<uint64_t>(s.h));
  append_pod<uint64_t>(out, static_cast<uint64_t>(s.w));
  append_pod<uint8_t>(out, dtype);
  append_raw(out, t.data(), static_cast<size_t>(t.size()) * sizeof(T));
  return out;
}

template <class T>
Tensor<T> tensor_from_bytes_impl(const std::vector<uint8_t>& bytes, uint8_t want_dtype) {
  size_t pos = 0;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kTensorMagic, 4) != 0)
    throw IoError("not a tensor blob (bad magic)");
  pos = 4;
  const auto version = read_pod<uint32_t>(bytes, pos);
  if (version != kVersion) throw IoError("unsupported tensor blob version " + std::to_string(version));
  const auto n = read_pod<uint64_t>(bytes, pos);
  const auto c = read_pod<uint64_t>(bytes, pos);
  const auto h = read_pod<uint64_t>(bytes, pos);
  const auto w = read_pod<uint64_t>(bytes, pos);
  const auto dtype = read_pod<uint8_t>(bytes, pos);
  if (dtype != want_dtype) throw IoError("tensor blob dtype mismatch");
  Shape4 shape(static_cast<int64_t>(n), static_cast<int64_t>(c), static_cast<int64_t>(h),
               static_cast<int64_t>(w));
  const size_t need = static_cast<size_t>(shape.count()) * sizeof(T);
  if (bytes.size() - pos != need) throw IoError("tensor blob truncated or oversized");
  Tensor<T> t(shape);
  std::memcpy(t.data(), bytes.data() + pos, need);
  return t;
}

std::vector<uint8_t> read_all(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  f.seekg(0, std::ios::end);
  const auto len = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(len));
  if (len > 0) f.read(reinterpret_cast<char*>(bytes.data()), len);
  if (!f) throw IoError("failed reading " + path);
  return bytes;
}

void write_all(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path);
}

}  // namespace

std::vector<uint8_t> tensor_to_bytes(const TensorF& t) { return tensor_bytes_impl(t, 0); }
std::vector<uint8_t> tensor_to_bytes(const TensorD& t) { return tensor_bytes_impl(t, 1); }

TensorF tensor_f32_from_bytes(const std::vector<uint8_t>& bytes) {
  return tensor_from_bytes_impl<float>(bytes, 0);
}
TensorD tensor_f64_from_bytes(const std::vector<uint8_t>& bytes) {
  return tensor_from_bytes_impl<double>(bytes, 1);
}

void write_tensor_file(const std::string& path, const TensorF& t) {
  write_all(path, tensor_to_bytes(t));
}

TensorF read_tensor_file_f32(const std::string& path) {
  return tensor_f32_from_bytes(read_all(path));
}

void Container::put_tensor(const std::string& name, const TensorF& t) {
  if (!entries_.count(name)) order_.push_back(name);
  entries_[name] = Entry{"tensor", tensor_to_bytes(t)};
}

void Container::put_json(const std::string& name, const nlohmann::json& j) {
  if (!entries_.count(name)) order_.push_back(name);
  const std::string s = j.dump();
  entries_[name] = Entry{"json", std::vector<uint8_t>(s.begin(), s.end())};
}

bool Container::has(const std::string& name) const { return entries_.count(name) > 0; }

std::vector<std::string> Container::names() const { return order_; }

TensorF Container::get_tensor(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IoError("container has no entry '" + name + "'");
  if (it->second.kind != "tensor") throw IoError("entry '" + name + "' is not a tensor");
  return tensor_f32_from_bytes(it->second.bytes);
}

nlohmann::json Container::get_json(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IoError("container has no entry '" + name + "'");
  if (it->second.kind != "json") throw IoError("entry '" + name + "' is not json");
  return nlohmann::json::parse(it->second.bytes.begin(), it->second.bytes.end());
}

void Container::save(const std::string& path) const {
  nlohmann::json manifest;
  manifest["entries"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& name : order_) {
    const Entry& e = entries_.at(name);
    manifest["entries"].push_back({{"name", name},
                                   {"kind", e.kind},
                                   {"offset", offset},
                                   {"size", e.bytes.size()}});
    offset += e.bytes.size();
  }
  const std::string mstr = manifest.dump();

  std::vector<uint8_t> out;
  append_raw(out, kContainerMagic, 4);
  append_pod<uint32_t>(out, kVersion);
  append_pod<uint64_t>(out, mstr.size());
  append_raw(out, mstr.data(), mstr.size());
  for (const auto& name : order_) append_raw(out, entries_.at(name).bytes.data(),
                                             entries_.at(name).bytes.size());
  write_all(path, out);
}

Container Container::load(const std::string& path) {
  const std::vector<uint8_t> bytes = read_all(path);
  size_t pos = 0;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0)
    throw IoError(path + ": not a weight container (bad magic)");
  pos = 4;
  const auto version = read_pod<uint32_t>(bytes, pos);
  if (version != kVersion)
    throw IoError(path + ": unsupported container version " + std::to_string(version));
  const auto mlen = read_pod<uint64_t>(bytes, pos);
  if (pos + mlen > bytes.size()) throw IoError(path + ": truncated container manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + static_cast<long>(pos),
                                     bytes.begin() + static_cast<long>(pos + mlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad container manifest: " + e.what());
  }
  pos += mlen;

  Container c;
  for (const auto& e : manifest.at("entries")) {
    const std::string name = e.at("name").get<std::string>();
    const std::string kind = e.at("kind").get<std::string>();
    const auto off = e.at("offset").get<uint64_t>();
    const auto size = e.at("size").get<uint64_t>();
    if (pos + off + size > bytes.size())
      throw IoError(path + ": truncated container (entry '" + name + "')");
    Entry entry;
    entry.kind = kind;
    entry.bytes.assign(bytes.begin() + static_cast<long>(pos + off),
                       bytes.begin() + static_cast<long>(pos + off + size));
    if (!c.entries_.count(name)) c.order_.push_back(name);
    c.entries_[name] = std::move(entry);
  }
  return c;
}

}  // namespace dseg
