#pragma once

#include <memory>
#include <new>
#include <numeric>
#include <sstream>
#include <utility>

#include "swaat/common.hpp"

namespace swaat {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

// 64-byte aligned storage. Eigen's vectorized kernels peel and reduce
// differently depending on pointer alignment, so buffers it maps must have a
// fixed alignment for results to be reproducible bit for bit.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Align}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{Align}); }

  template <typename U>
  bool operator==(const AlignedAllocator<U, Align>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Allocator that leaves trivially constructible values uninitialized when no
// fill value is given; outputs that are fully overwritten skip the memset.
template <typename T, typename A = std::allocator<T>>
class DefaultInitAllocator : public A {
  using traits = std::allocator_traits<A>;

 public:
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U, typename traits::template rebind_alloc<U>>;
  };
  using A::A;

  template <typename U>
  void construct(U* ptr) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(ptr)) U;
  }
  template <typename U, typename... Args>
  void construct(U* ptr, Args&&... args) {
    traits::construct(static_cast<A&>(*this), ptr, std::forward<Args>(args)...);
  }
};

struct Uninitialized {};

// Dense row-major n-d array. Axis 0 is the batch axis wherever a batch exists.
template <Real T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, DefaultInitAllocator<T, AlignedAllocator<T>>>;

  Tensor() = default;

  Tensor(Shape shape, Uninitialized) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.resize(shape_size(shape_));
  }

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : Tensor(std::move(shape), data.begin(), data.end()) {}

  template <typename It>
  Tensor(Shape shape, It first, It last) : shape_(std::move(shape)), data_(first, last) {
    check_shape(shape_);
    if (shape_size(shape_) != data_.size())
      throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t batch() const { return shape_.empty() ? 0 : shape_[0]; }
  // Number of values per example (product of all but the batch axis).
  std::size_t example_size() const { return batch() == 0 ? 0 : data_.size() / batch(); }
  Shape example_shape() const { return Shape(shape_.begin() + 1, shape_.end()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> example(std::size_t b) {
    const auto n = example_size();
    return std::span<T>(data_).subspan(b * n, n);
  }
  std::span<const T> example(std::size_t b) const {
    const auto n = example_size();
    return std::span<const T>(data_).subspan(b * n, n);
  }

  Tensor reshaped(Shape s) const& {
    Tensor t(*this);
    t.reshape(std::move(s));
    return t;
  }
  Tensor reshaped(Shape s) && {
    reshape(std::move(s));
    return std::move(*this);
  }
  void reshape(Shape s) {
    if (shape_size(s) != data_.size())
      throw ShapeError("tensor: cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    shape_ = std::move(s);
  }

  // Copy of examples [begin, begin + count) along axis 0.
  Tensor slice(std::size_t begin, std::size_t count) const {
    if (begin + count > batch()) throw ShapeError("tensor: slice out of range");
    Shape s = shape_;
    s[0] = count;
    const auto n = example_size();
    return Tensor(std::move(s), data_.begin() + static_cast<std::ptrdiff_t>(begin * n),
                  data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  }

  // Overwrites examples starting at `begin` with the contents of `src`.
  void assign_slice(std::size_t begin, const Tensor& src) {
    if (src.example_size() != example_size() || begin + src.batch() > batch())
      throw ShapeError("tensor: assign_slice shape mismatch");
    std::copy(src.data_.begin(), src.data_.end(),
              data_.begin() + static_cast<std::ptrdiff_t>(begin * example_size()));
  }

  // Exponent-field test; vectorizes, unlike std::isfinite.
  bool all_finite() const {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits exp_mask = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
    Bits bad = 0;
    for (const T v : data_) {
      const Bits b = std::bit_cast<Bits>(v) & exp_mask;
      bad |= static_cast<Bits>(b == exp_mask);
    }
    return bad == 0;
  }

  template <Real U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, data_.begin(), data_.end());
  }

  bool operator==(const Tensor&) const = default;

 private:
  static void check_shape(const Shape& s) {
    for (auto d : s)
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(s));
  }

  Shape shape_;
  Storage data_;
};

// Gathers the given examples (axis 0) into a new tensor.
template <Real T>
Tensor<T> gather(const Tensor<T>& src, std::span<const std::size_t> index) {
  Shape s = src.shape();
  s[0] = index.size();
  Tensor<T> out(s, Uninitialized{});
  for (std::size_t i = 0; i < index.size(); ++i) {
    auto from = src.example(index[i]);
    std::copy(from.begin(), from.end(), out.example(i).begin());
  }
  return out;
}

// Row-wise argmax; ties go to the lowest index.
template <Real T>
std::vector<int> argmax_rows(const Tensor<T>& m) {
  std::vector<int> out(m.batch());
  const auto c = m.example_size();
  for (std::size_t b = 0; b < m.batch(); ++b) {
    const T* row = m.data() + b * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    out[b] = static_cast<int>(best);
  }
  return out;
}

}  // namespace swaat
