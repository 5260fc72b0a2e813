#pragma once

// Integer box algebra over row-major N-dimensional arrays (N <= 3).
//
// Boxes are half-open: an element with index i lies in dimension d of a box
// iff lower(d) <= i < upper(d). Region buffers store their elements in
// row-major order, last dimension contiguous.

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace stagespace {

using Coord = std::uint64_t;

inline constexpr std::size_t kMaxDims = 3;

class NDBox {
 public:
  /// Throws a usage error unless 1 <= lower.size() == upper.size() <= 3 and
  /// lower[d] < upper[d] for every d.
  NDBox(std::span<const Coord> lower, std::span<const Coord> upper);
  NDBox(std::initializer_list<Coord> lower, std::initializer_list<Coord> upper);

  /// Box [0, extents[d]) in every dimension.
  static NDBox from_extents(std::span<const Coord> extents);

  std::size_t ndims() const { return ndims_; }
  Coord lower(std::size_t d) const { return lower_[d]; }
  Coord upper(std::size_t d) const { return upper_[d]; }
  Coord extent(std::size_t d) const { return upper_[d] - lower_[d]; }

  std::span<const Coord> lower() const { return {lower_.data(), ndims_}; }
  std::span<const Coord> upper() const { return {upper_.data(), ndims_}; }

  friend auto operator<=>(const NDBox&, const NDBox&) = default;
  friend bool operator==(const NDBox&, const NDBox&) = default;

  /// "[0,4)x[2,8)"
  std::string to_string() const;

 private:
  std::uint8_t ndims_ = 0;
  std::array<Coord, kMaxDims> lower_{};
  std::array<Coord, kMaxDims> upper_{};
};

std::optional<NDBox> intersect(const NDBox& a, const NDBox& b);

std::uint64_t volume(const NDBox& b);

/// True iff `inner` lies entirely inside `outer`.
bool contains(const NDBox& outer, const NDBox& inner);

/// True iff every element of `target` lies in at least one piece.
bool covers(const NDBox& target, std::span<const NDBox> pieces);

/// Splits `global` into prod(parts_per_dim) equal boxes, row-major over the
/// part coordinates. Every extent must be divisible by its part count.
std::vector<NDBox> decompose_grid(const NDBox& global,
                                  std::span<const std::uint64_t> parts_per_dim);

/// Row-major linear index of `point` inside `box`.
std::uint64_t linear_index(const NDBox& box, std::span<const Coord> point);

/// Smallest box containing both.
NDBox bounding_box(const NDBox& a, const NDBox& b);

struct ConstRegionView {
  NDBox box;
  std::size_t element_size;
  std::span<const std::byte> bytes;
};

struct MutableRegionView {
  NDBox box;
  std::size_t element_size;
  std::span<std::byte> bytes;
};

/// Owning row-major buffer over a box.
class RegionBuffer {
 public:
  /// Zero-filled buffer of volume(box) * element_size bytes.
  RegionBuffer(NDBox box, std::size_t element_size);
  /// Takes ownership of `bytes`; their length must match the box exactly.
  RegionBuffer(NDBox box, std::size_t element_size, std::vector<std::byte> bytes);

  const NDBox& box() const { return box_; }
  std::size_t element_size() const { return element_size_; }
  std::span<const std::byte> bytes() const { return bytes_; }
  std::span<std::byte> bytes() { return bytes_; }
  std::vector<std::byte> release() && { return std::move(bytes_); }

  ConstRegionView view() const { return {box_, element_size_, bytes_}; }
  MutableRegionView mutable_view() { return {box_, element_size_, bytes_}; }

 private:
  NDBox box_;
  std::size_t element_size_;
  std::vector<std::byte> bytes_;
};

/// Copies the elements of `region` from src to dst. Returns volume(region).
std::uint64_t copy_region(const ConstRegionView& src, const MutableRegionView& dst,
                          const NDBox& region);

}  // namespace stagespace
