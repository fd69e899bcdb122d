#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "dbr/error.hpp"

namespace dbr {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* dtype_name(DType dtype);

// f32 op f64 -> f64.
constexpr DType promote(DType a, DType b) {
  return (a == DType::f64 || b == DType::f64) ? DType::f64 : DType::f32;
}

// Rounds a value to what the dtype can represent.
inline double round_to(DType dtype, double v) {
  return dtype == DType::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) {}
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {}

  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  auto begin() const noexcept { return dims_.begin(); }
  auto end() const noexcept { return dims_.end(); }

  // Product of extents; throws ShapeError on overflow.
  std::size_t numel() const;

  // Row-major strides in elements.
  std::vector<std::size_t> strides() const;

  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<std::size_t> dims_;
};

// Process-global count of live tensor buffers. Every buffer registers on
// allocation and deregisters when its storage is destroyed.
class BufferRegistry {
 public:
  static BufferRegistry& instance();

  std::int64_t live_count() const noexcept { return live_.load(); }
  std::int64_t peak_count() const noexcept { return peak_.load(); }
  std::uint64_t total_allocations() const noexcept { return total_.load(); }
  void reset_peak() noexcept { peak_.store(live_.load()); }
  bool is_live(std::uint64_t buffer_id) const;

  std::uint64_t on_allocate();
  void on_release(std::uint64_t buffer_id);

 private:
  BufferRegistry() = default;

  std::atomic<std::int64_t> live_{0};
  std::atomic<std::int64_t> peak_{0};
  std::atomic<std::uint64_t> total_{0};
  std::atomic<std::uint64_t> next_id_{1};
  mutable std::mutex mutex_;
  std::unordered_set<std::uint64_t> live_ids_;
};

// Dense row-major n-dimensional array. Values are stored as doubles; f32
// tensors hold only values representable in single precision and every
// operation rounds its results to the output dtype.
//
// Copies share the underlying buffer. Tensors are treated as immutable apart
// from mutable_values(), which optimizers use for in-place parameter updates.
class Tensor {
 public:
  Tensor() = default;

  static Tensor full(const Shape& shape, DType dtype, double fill);
  static Tensor zeros(const Shape& shape, DType dtype = DType::f64) { return full(shape, dtype, 0.0); }
  static Tensor ones(const Shape& shape, DType dtype = DType::f64) { return full(shape, dtype, 1.0); }
  static Tensor scalar(double value, DType dtype = DType::f64) { return full(Shape{}, dtype, value); }
  static Tensor from_values(const Shape& shape, std::vector<double> values, DType dtype = DType::f64);
  static Tensor zeros_like(const Tensor& t) { return zeros(t.shape(), t.dtype()); }
  static Tensor ones_like(const Tensor& t) { return ones(t.shape(), t.dtype()); }

  bool defined() const noexcept { return buffer_ != nullptr; }
  const Shape& shape() const noexcept { return shape_; }
  DType dtype() const noexcept { return dtype_; }
  std::size_t rank() const noexcept { return shape_.rank(); }
  std::size_t numel() const noexcept { return buffer_ ? buffer_->values.size() : 0; }

  std::span<const double> values() const;
  std::span<double> mutable_values();

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  std::uint64_t buffer_id() const noexcept { return buffer_ ? buffer_->id : 0; }

  // Deep copy into a freshly registered buffer.
  Tensor clone() const;
  Tensor astype(DType dtype) const;

  std::string str() const;

 private:
  struct Buffer {
    explicit Buffer(std::vector<double> v);
    ~Buffer();
    Buffer(const Buffer&) = delete;
    Buffer& operator=(const Buffer&) = delete;

    std::vector<double> values;
    std::uint64_t id;
  };

  Tensor(Shape shape, DType dtype, std::vector<double> values);

  std::shared_ptr<Buffer> buffer_;
  Shape shape_;
  DType dtype_ = DType::f64;
};

}  // namespace dbr
