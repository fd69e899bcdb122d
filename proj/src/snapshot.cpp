#include "dbr/snapshot.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace dbr {
namespace le {
namespace {

template <typename T>
void put(std::ostream& out, T v) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw SerializationError("unexpected end of snapshot stream");
  }
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void put_u8(std::ostream& out, std::uint8_t v) { put(out, v); }
void put_u32(std::ostream& out, std::uint32_t v) { put(out, v); }
void put_u64(std::ostream& out, std::uint64_t v) { put(out, v); }
std::uint8_t get_u8(std::istream& in) { return get<std::uint8_t>(in); }
std::uint32_t get_u32(std::istream& in) { return get<std::uint32_t>(in); }
std::uint64_t get_u64(std::istream& in) { return get<std::uint64_t>(in); }

}  // namespace le

void write_tensor(std::ostream& out, const Tensor& tensor) {
  le::put_u8(out, static_cast<std::uint8_t>(tensor.dtype()));
  le::put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (auto d : tensor.shape()) le::put_u64(out, d);
  for (double v : tensor.values()) {
    if (tensor.dtype() == DType::f32) {
      le::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      le::put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
}

Tensor read_tensor(std::istream& in) {
  const auto tag = le::get_u8(in);
  if (tag > 1) throw SerializationError("unknown dtype tag " + std::to_string(tag));
  const auto dtype = static_cast<DType>(tag);
  const auto rank = le::get_u32(in);
  std::vector<std::size_t> dims(rank);
  for (auto& d : dims) d = static_cast<std::size_t>(le::get_u64(in));
  const Shape shape(std::move(dims));
  std::vector<double> values(shape.numel());
  for (auto& v : values) {
    v = dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(le::get_u32(in)))
                            : std::bit_cast<double>(le::get_u64(in));
  }
  return Tensor::from_values(shape, std::move(values), dtype);
}

void write_snapshot(std::ostream& out, const std::vector<SnapshotRecord>& records) {
  for (const auto& r : records) {
    le::put_u32(out, static_cast<std::uint32_t>(r.path.size()));
    out.write(r.path.data(), static_cast<std::streamsize>(r.path.size()));
    write_tensor(out, r.tensor);
  }
  if (!out) throw SerializationError("failed to write snapshot");
}

std::vector<SnapshotRecord> read_snapshot(std::istream& in) {
  std::vector<SnapshotRecord> records;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto len = le::get_u32(in);
    std::string path(len, '\0');
    in.read(path.data(), len);
    if (in.gcount() != static_cast<std::streamsize>(len)) throw SerializationError("truncated record path");
    records.push_back({std::move(path), read_tensor(in)});
  }
  return records;
}

void save_snapshot(const std::filesystem::path& file, const std::vector<SnapshotRecord>& records) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw SerializationError("cannot open " + file.string() + " for writing");
  write_snapshot(out, records);
}

std::vector<SnapshotRecord> load_snapshot(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw SerializationError("cannot open " + file.string());
  return read_snapshot(in);
}

}  // namespace dbr
