#include "layerfuse/container.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace layerfuse {

namespace {

constexpr std::size_t kLengthBytes = 8;

std::uint64_t read_u64_le(const unsigned char* bytes) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

void write_u64_le(std::uint64_t v, unsigned char* bytes) {
  for (int i = 0; i < 8; ++i) {
    bytes[i] = static_cast<unsigned char>(v & 0xff);
    v >>= 8;
  }
}

}  // namespace

void TensorStore::put(const std::string& name, std::vector<std::size_t> shape,
                      std::vector<float> values) {
  std::size_t expected = shape.empty() ? 0 : 1;
  for (std::size_t d : shape) expected *= d;
  if (expected != values.size()) {
    throw Error::invalid_input("tensor '" + name + "' shape does not match value count");
  }
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw Error::invalid_input("tensor '" + name + "' contains a non-finite value");
    }
  }
  tensors_[name] = StoredTensor{std::move(shape), std::move(values)};
}

void TensorStore::put_f64(const std::string& name, std::vector<std::size_t> shape,
                          const std::vector<double>& values) {
  std::vector<float> f(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) f[i] = static_cast<float>(values[i]);
  put(name, std::move(shape), std::move(f));
}

bool TensorStore::contains(const std::string& name) const {
  return tensors_.count(name) != 0;
}

const StoredTensor& TensorStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw Error::format("tensor '" + name + "' not present in container");
  }
  return it->second;
}

std::vector<double> TensorStore::get_f64(const std::string& name) const {
  const StoredTensor& t = get(name);
  std::vector<double> out(t.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(t.values[i]);
  return out;
}

std::vector<std::string> TensorStore::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, tensor] : tensors_) out.push_back(name);
  return out;
}

void TensorStore::save(const std::string& path) const {
  nlohmann::json header = nlohmann::json::object();
  header["__meta__"] = meta_;

  std::size_t offset = 0;
  for (const auto& [name, tensor] : tensors_) {
    const std::size_t bytes = tensor.values.size() * sizeof(float);
    nlohmann::json entry = nlohmann::json::object();
    entry["dtype"] = "f32";
    entry["shape"] = tensor.shape;
    entry["offsets"] = {offset, offset + bytes};
    header[name] = std::move(entry);
    offset += bytes;
  }

  const std::string header_text = header.dump();
  unsigned char length_bytes[kLengthBytes];
  write_u64_le(header_text.size(), length_bytes);

  const std::string tmp_path = path + ".tmp";
  {
    std::ofstream out(tmp_path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error::format("cannot open '" + tmp_path + "' for writing");
    out.write(reinterpret_cast<const char*>(length_bytes), kLengthBytes);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& [name, tensor] : tensors_) {
      // Host is little-endian (see README); floats are stored as raw bits.
      out.write(reinterpret_cast<const char*>(tensor.values.data()),
                static_cast<std::streamsize>(tensor.values.size() * sizeof(float)));
    }
    if (!out) throw Error::format("write failed for '" + tmp_path + "'");
  }
  std::filesystem::rename(tmp_path, path);
}

TensorStore TensorStore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error::format("cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);

  if (file_size < kLengthBytes) {
    throw Error::format("header length exceeds file size", 0);
  }
  unsigned char length_bytes[kLengthBytes];
  in.read(reinterpret_cast<char*>(length_bytes), kLengthBytes);
  const std::uint64_t header_len = read_u64_le(length_bytes);
  if (kLengthBytes + header_len > file_size) {
    throw Error::format("header length exceeds file size", 0);
  }

  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));

  nlohmann::json header = nlohmann::json::parse(header_text, nullptr, false);
  if (header.is_discarded() || !header.is_object()) {
    throw Error::format("malformed header JSON", kLengthBytes);
  }

  const std::size_t data_base = kLengthBytes + header_len;
  const std::size_t data_size = file_size - data_base;

  TensorStore store;
  if (header.contains("__meta__")) store.meta_ = header["__meta__"];

  for (auto& [name, entry] : header.items()) {
    if (name == "__meta__") continue;
    if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry.contains("offsets")) {
      throw Error::format("malformed header entry for tensor '" + name + "'", kLengthBytes);
    }
    if (entry["dtype"].get<std::string>() != "f32") {
      throw Error::format("unsupported dtype for tensor '" + name + "'", kLengthBytes);
    }
    std::vector<std::size_t> shape = entry["shape"].get<std::vector<std::size_t>>();
    const auto offsets = entry["offsets"].get<std::vector<std::size_t>>();
    if (offsets.size() != 2 || offsets[1] < offsets[0]) {
      throw Error::format("malformed offsets for tensor '" + name + "'", kLengthBytes);
    }
    const std::size_t begin = offsets[0];
    const std::size_t end = offsets[1];

    std::size_t expected = shape.empty() ? 0 : 1;
    for (std::size_t d : shape) expected *= d;
    if (expected * sizeof(float) != end - begin) {
      throw Error::format("shape mismatch for tensor '" + name + "'", data_base + begin);
    }
    if (end > data_size) {
      throw Error::format("truncated data for tensor '" + name + "'", data_base + begin);
    }

    std::vector<float> values(expected);
    in.seekg(static_cast<std::streamoff>(data_base + begin), std::ios::beg);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(expected * sizeof(float)));
    if (!in) throw Error::format("read failed for tensor '" + name + "'", data_base + begin);
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) {
        throw Error::format("non-finite value in tensor '" + name + "'",
                            data_base + begin + i * sizeof(float));
      }
    }
    store.tensors_[name] = StoredTensor{std::move(shape), std::move(values)};
  }
  return store;
}

}  // namespace layerfuse
