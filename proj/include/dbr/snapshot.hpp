#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dbr/tensor.hpp"

namespace dbr {

// One named tensor in a snapshot stream.
struct SnapshotRecord {
  std::string path;
  Tensor tensor;
};

// Little-endian records, concatenated with no framing:
//   u32 path length | UTF-8 path | u8 dtype (0=f32, 1=f64) | u32 rank |
//   u64 extent * rank | raw values (4 or 8 bytes each)
void write_snapshot(std::ostream& out, const std::vector<SnapshotRecord>& records);
std::vector<SnapshotRecord> read_snapshot(std::istream& in);

void save_snapshot(const std::filesystem::path& file, const std::vector<SnapshotRecord>& records);
std::vector<SnapshotRecord> load_snapshot(const std::filesystem::path& file);

// Shape header and values without the path prefix; shared with the TCP wire
// format.
void write_tensor(std::ostream& out, const Tensor& tensor);
Tensor read_tensor(std::istream& in);

namespace le {
void put_u8(std::ostream& out, std::uint8_t v);
void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
// Throws SerializationError on a short read.
std::uint8_t get_u8(std::istream& in);
std::uint32_t get_u32(std::istream& in);
std::uint64_t get_u64(std::istream& in);
}  // namespace le

}  // namespace dbr
