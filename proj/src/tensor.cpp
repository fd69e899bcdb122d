#include "dbr/tensor.hpp"

#include <limits>
#include <sstream>

namespace dbr {

const char* dtype_name(DType dtype) {
  return dtype == DType::f32 ? "float32" : "float64";
}

std::size_t Shape::numel() const {
  std::size_t n = 1;
  for (auto d : dims_) {
    if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d) {
      throw ShapeError("element count overflow for shape " + str());
    }
    n *= d;
  }
  return n;
}

std::vector<std::size_t> Shape::strides() const {
  std::vector<std::size_t> s(dims_.size(), 1);
  for (std::size_t i = dims_.size(); i-- > 1;) {
    s[i - 1] = s[i] * dims_[i];
  }
  return s;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    if (i) os << ", ";
    os << dims_[i];
  }
  if (dims_.size() == 1) os << ',';
  os << ')';
  return os.str();
}

BufferRegistry& BufferRegistry::instance() {
  static BufferRegistry registry;
  return registry;
}

std::uint64_t BufferRegistry::on_allocate() {
  const std::uint64_t id = next_id_.fetch_add(1);
  {
    std::lock_guard lock(mutex_);
    live_ids_.insert(id);
  }
  const auto live = live_.fetch_add(1) + 1;
  total_.fetch_add(1);
  auto peak = peak_.load();
  while (live > peak && !peak_.compare_exchange_weak(peak, live)) {
  }
  return id;
}

void BufferRegistry::on_release(std::uint64_t buffer_id) {
  {
    std::lock_guard lock(mutex_);
    live_ids_.erase(buffer_id);
  }
  live_.fetch_sub(1);
}

bool BufferRegistry::is_live(std::uint64_t buffer_id) const {
  std::lock_guard lock(mutex_);
  return live_ids_.contains(buffer_id);
}

Tensor::Buffer::Buffer(std::vector<double> v)
    : values(std::move(v)), id(BufferRegistry::instance().on_allocate()) {}

Tensor::Buffer::~Buffer() { BufferRegistry::instance().on_release(id); }

Tensor::Tensor(Shape shape, DType dtype, std::vector<double> values)
    : buffer_(std::make_shared<Buffer>(std::move(values))), shape_(std::move(shape)), dtype_(dtype) {}

Tensor Tensor::full(const Shape& shape, DType dtype, double fill) {
  const std::size_t n = shape.numel();
  return Tensor(shape, dtype, std::vector<double>(n, round_to(dtype, fill)));
}

Tensor Tensor::from_values(const Shape& shape, std::vector<double> values, DType dtype) {
  if (values.size() != shape.numel()) {
    throw ShapeError("expected " + std::to_string(shape.numel()) + " values for shape " + shape.str() +
                     ", got " + std::to_string(values.size()));
  }
  if (dtype == DType::f32) {
    for (auto& v : values) v = round_to(dtype, v);
  }
  return Tensor(shape, dtype, std::move(values));
}

std::span<const double> Tensor::values() const {
  if (!buffer_) return {};
  return buffer_->values;
}

std::span<double> Tensor::mutable_values() {
  if (!buffer_) return {};
  return buffer_->values;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() requires exactly one element, shape is " + shape_.str());
  }
  return buffer_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank does not match tensor rank");
  const auto strides = shape_.strides();
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw ShapeError("index out of range");
    offset += i * strides[axis++];
  }
  return buffer_->values[offset];
}

Tensor Tensor::clone() const {
  return Tensor(shape_, dtype_, std::vector<double>(values().begin(), values().end()));
}

Tensor Tensor::astype(DType dtype) const {
  std::vector<double> v(values().begin(), values().end());
  return from_values(shape_, std::move(v), dtype);
}

std::string Tensor::str() const {
  std::ostringstream os;
  os << "Tensor" << shape_.str() << ' ' << dtype_name(dtype_) << " [";
  const auto v = values();
  for (std::size_t i = 0; i < v.size() && i < 16; ++i) {
    if (i) os << ", ";
    os << v[i];
  }
  if (v.size() > 16) os << ", ...";
  os << ']';
  return os.str();
}

}  // namespace dbr
