#include "stagespace/geometry.hpp"

#include <algorithm>
#include <cstring>

#include "stagespace/error.hpp"

namespace stagespace {

namespace {

void check_same_dims(const NDBox& a, const NDBox& b, const char* op) {
  if (a.ndims() != b.ndims()) {
    throw_usage(std::string(op) + ": dimension mismatch " + a.to_string() + " vs " +
                b.to_string());
  }
}

std::size_t check_view(const NDBox& box, std::size_t element_size, std::size_t length,
                       const char* what) {
  if (element_size == 0) throw_usage(std::string(what) + ": element_size is zero");
  const std::uint64_t expect = volume(box) * element_size;
  if (expect != length) {
    throw_usage(std::string(what) + ": buffer holds " + std::to_string(length) +
                " bytes, box " + box.to_string() + " needs " + std::to_string(expect));
  }
  return static_cast<std::size_t>(expect);
}

// Appends the pieces of `box` that lie outside `hole` (at most 2*ndims boxes).
void subtract(const NDBox& box, const NDBox& hole, std::vector<NDBox>& out) {
  auto cut = intersect(box, hole);
  if (!cut) {
    out.push_back(box);
    return;
  }
  std::array<Coord, kMaxDims> lo{};
  std::array<Coord, kMaxDims> hi{};
  const std::size_t n = box.ndims();
  for (std::size_t d = 0; d < n; ++d) {
    lo[d] = box.lower(d);
    hi[d] = box.upper(d);
  }
  // Peel slabs dimension by dimension; what remains shrinks to the cut.
  for (std::size_t d = 0; d < n; ++d) {
    if (lo[d] < cut->lower(d)) {
      auto slab_hi = hi;
      slab_hi[d] = cut->lower(d);
      out.emplace_back(std::span<const Coord>(lo.data(), n),
                       std::span<const Coord>(slab_hi.data(), n));
      lo[d] = cut->lower(d);
    }
    if (cut->upper(d) < hi[d]) {
      auto slab_lo = lo;
      slab_lo[d] = cut->upper(d);
      out.emplace_back(std::span<const Coord>(slab_lo.data(), n),
                       std::span<const Coord>(hi.data(), n));
      hi[d] = cut->upper(d);
    }
  }
}

}  // namespace

NDBox::NDBox(std::span<const Coord> lower, std::span<const Coord> upper) {
  if (lower.empty() || lower.size() > kMaxDims || lower.size() != upper.size()) {
    throw_usage("NDBox: need 1..3 dimensions with matching lower/upper, got " +
                std::to_string(lower.size()) + "/" + std::to_string(upper.size()));
  }
  ndims_ = static_cast<std::uint8_t>(lower.size());
  for (std::size_t d = 0; d < ndims_; ++d) {
    if (lower[d] >= upper[d]) {
      throw_usage("NDBox: empty or inverted extent in dimension " + std::to_string(d));
    }
    lower_[d] = lower[d];
    upper_[d] = upper[d];
  }
}

NDBox::NDBox(std::initializer_list<Coord> lower, std::initializer_list<Coord> upper)
    : NDBox(std::span<const Coord>(lower.begin(), lower.size()),
            std::span<const Coord>(upper.begin(), upper.size())) {}

NDBox NDBox::from_extents(std::span<const Coord> extents) {
  std::array<Coord, kMaxDims> zeros{};
  return NDBox(std::span<const Coord>(zeros.data(), std::min(extents.size(), kMaxDims)),
               extents);
}

std::string NDBox::to_string() const {
  std::string s;
  for (std::size_t d = 0; d < ndims_; ++d) {
    if (d) s += 'x';
    s += '[' + std::to_string(lower_[d]) + ',' + std::to_string(upper_[d]) + ')';
  }
  return s;
}

std::optional<NDBox> intersect(const NDBox& a, const NDBox& b) {
  check_same_dims(a, b, "intersect");
  std::array<Coord, kMaxDims> lo{};
  std::array<Coord, kMaxDims> hi{};
  for (std::size_t d = 0; d < a.ndims(); ++d) {
    lo[d] = std::max(a.lower(d), b.lower(d));
    hi[d] = std::min(a.upper(d), b.upper(d));
    if (lo[d] >= hi[d]) return std::nullopt;
  }
  return NDBox(std::span<const Coord>(lo.data(), a.ndims()),
               std::span<const Coord>(hi.data(), a.ndims()));
}

std::uint64_t volume(const NDBox& b) {
  std::uint64_t v = 1;
  for (std::size_t d = 0; d < b.ndims(); ++d) v *= b.extent(d);
  return v;
}

bool contains(const NDBox& outer, const NDBox& inner) {
  check_same_dims(outer, inner, "contains");
  for (std::size_t d = 0; d < outer.ndims(); ++d) {
    if (inner.lower(d) < outer.lower(d) || inner.upper(d) > outer.upper(d)) return false;
  }
  return true;
}

bool covers(const NDBox& target, std::span<const NDBox> pieces) {
  std::vector<NDBox> remaining{target};
  std::vector<NDBox> next;
  for (const auto& piece : pieces) {
    check_same_dims(target, piece, "covers");
    next.clear();
    for (const auto& r : remaining) subtract(r, piece, next);
    remaining.swap(next);
    if (remaining.empty()) return true;
  }
  return remaining.empty();
}

std::vector<NDBox> decompose_grid(const NDBox& global,
                                  std::span<const std::uint64_t> parts_per_dim) {
  const std::size_t n = global.ndims();
  if (parts_per_dim.size() != n) {
    throw_usage("decompose_grid: " + std::to_string(parts_per_dim.size()) +
                " part counts for a " + std::to_string(n) + "-d box");
  }
  std::array<Coord, kMaxDims> step{};
  std::uint64_t total = 1;
  for (std::size_t d = 0; d < n; ++d) {
    const auto parts = parts_per_dim[d];
    if (parts == 0 || global.extent(d) % parts != 0) {
      throw_usage("decompose_grid: extent " + std::to_string(global.extent(d)) +
                  " of dimension " + std::to_string(d) + " not divisible by " +
                  std::to_string(parts));
    }
    step[d] = global.extent(d) / parts;
    total *= parts;
  }

  std::vector<NDBox> out;
  out.reserve(total);
  std::array<std::uint64_t, kMaxDims> idx{};
  for (std::uint64_t i = 0; i < total; ++i) {
    std::array<Coord, kMaxDims> lo{};
    std::array<Coord, kMaxDims> hi{};
    for (std::size_t d = 0; d < n; ++d) {
      lo[d] = global.lower(d) + idx[d] * step[d];
      hi[d] = lo[d] + step[d];
    }
    out.emplace_back(std::span<const Coord>(lo.data(), n), std::span<const Coord>(hi.data(), n));
    // Row-major increment: last dimension fastest.
    for (std::size_t d = n; d-- > 0;) {
      if (++idx[d] < parts_per_dim[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

std::uint64_t linear_index(const NDBox& box, std::span<const Coord> point) {
  std::uint64_t idx = 0;
  for (std::size_t d = 0; d < box.ndims(); ++d) {
    idx = idx * box.extent(d) + (point[d] - box.lower(d));
  }
  return idx;
}

NDBox bounding_box(const NDBox& a, const NDBox& b) {
  check_same_dims(a, b, "bounding_box");
  std::array<Coord, kMaxDims> lo{};
  std::array<Coord, kMaxDims> hi{};
  for (std::size_t d = 0; d < a.ndims(); ++d) {
    lo[d] = std::min(a.lower(d), b.lower(d));
    hi[d] = std::max(a.upper(d), b.upper(d));
  }
  return NDBox(std::span<const Coord>(lo.data(), a.ndims()),
               std::span<const Coord>(hi.data(), a.ndims()));
}

RegionBuffer::RegionBuffer(NDBox box, std::size_t element_size)
    : box_(box), element_size_(element_size) {
  if (element_size == 0) throw_usage("RegionBuffer: element_size is zero");
  bytes_.resize(volume(box_) * element_size_);
}

RegionBuffer::RegionBuffer(NDBox box, std::size_t element_size, std::vector<std::byte> bytes)
    : box_(box), element_size_(element_size), bytes_(std::move(bytes)) {
  check_view(box_, element_size_, bytes_.size(), "RegionBuffer");
}

std::uint64_t copy_region(const ConstRegionView& src, const MutableRegionView& dst,
                          const NDBox& region) {
  check_view(src.box, src.element_size, src.bytes.size(), "copy_region src");
  check_view(dst.box, dst.element_size, dst.bytes.size(), "copy_region dst");
  if (src.element_size != dst.element_size) {
    throw_usage("copy_region: element sizes differ");
  }
  if (!contains(src.box, region) || !contains(dst.box, region)) {
    throw_usage("copy_region: region " + region.to_string() + " outside src " +
                src.box.to_string() + " or dst " + dst.box.to_string());
  }

  const std::size_t n = region.ndims();
  const std::size_t es = src.element_size;
  const std::size_t run = static_cast<std::size_t>(region.extent(n - 1)) * es;

  // Walk every row of the region (all coordinates except the last), copying
  // one contiguous run per row.
  std::array<Coord, kMaxDims> point{};
  for (std::size_t d = 0; d < n; ++d) point[d] = region.lower(d);
  const std::span<const Coord> pt(point.data(), n);
  while (true) {
    const auto s = linear_index(src.box, pt) * es;
    const auto t = linear_index(dst.box, pt) * es;
    std::memcpy(dst.bytes.data() + t, src.bytes.data() + s, run);
    std::size_t d = n - 1;
    while (d-- > 0) {
      if (++point[d] < region.upper(d)) break;
      point[d] = region.lower(d);
    }
    if (d == static_cast<std::size_t>(-1)) break;
  }
  return volume(region);
}

}  // namespace stagespace
