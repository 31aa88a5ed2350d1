#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace reportpilot::imaging {

enum class Modality { CT, XR, Other };
enum class Axis { X, Y, Z };
enum class DType { U8, I16, F32 };

std::string modality_name(Modality m);
Modality parse_modality(std::string_view name);
std::string dtype_name(DType d);
Axis parse_axis(std::string_view name);

struct Dims {
  int nx = 1, ny = 1, nz = 1;

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  int extent(Axis a) const noexcept { return a == Axis::X ? nx : a == Axis::Y ? ny : nz; }
  std::size_t index(int x, int y, int z) const noexcept {
    return (static_cast<std::size_t>(z) * static_cast<std::size_t>(ny) +
            static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(nx) +
           static_cast<std::size_t>(x);
  }
  friend bool operator==(const Dims&, const Dims&) = default;
};

// Millimeters per voxel edge along x, y, z.
using Spacing = std::array<double, 3>;

// Label id (>= 1) to organ name. Id 0 is background and never a key.
using LabelTable = std::map<std::uint32_t, std::string>;

// Intensity volume; data is row-major with x fastest.
struct VoxelVolume {
  Dims dims;
  Spacing spacing{1.0, 1.0, 1.0};
  Modality modality = Modality::CT;
  std::vector<float> data;

  float at(int x, int y, int z) const { return data[dims.index(x, y, z)]; }
};

struct LabelMask {
  Dims dims;
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<std::uint32_t> labels;
  LabelTable label_table;

  std::uint32_t at(int x, int y, int z) const { return labels[dims.index(x, y, z)]; }
  // Label id for an organ name, or 0 when the table has no such organ.
  std::uint32_t find_label(std::string_view organ) const;
};

struct SliceRaster {
  Axis axis = Axis::Z;
  int index = 0;
  int width = 0;
  int height = 0;
  std::vector<std::uint32_t> labels;  // row-major, width fastest
};

using Image = std::variant<VoxelVolume, LabelMask>;

struct NiftiOptions {
  bool as_mask = false;
  LabelTable label_table;
  Modality modality = Modality::CT;
};

// Throws Error{BadMagic, UnsupportedDatatype, TruncatedData, NonPositiveSpacing,
// MalformedHeader, MaskDtypeNotInteger, UnknownLabel}.
Image parse_nifti(std::span<const std::byte> bytes, const NiftiOptions& options = {});
VoxelVolume parse_nifti_volume(std::span<const std::byte> bytes,
                               Modality modality = Modality::CT);
LabelMask parse_nifti_mask(std::span<const std::byte> bytes, const LabelTable& table);

// {"1": "kidney_left", ...}, optionally wrapped as {"labels": {...}}.
// Throws MalformedHeader.
LabelTable parse_label_table(std::string_view json_text);

// Raw format: JSON sidecar header plus a little-endian blob.
Image parse_raw(std::string_view header_json, std::span<const std::byte> data);

struct RawFiles {
  std::string header_json;
  std::vector<std::byte> data;
};

RawFiles serialize_raw(const VoxelVolume& volume, DType dtype);
RawFiles serialize_raw(const LabelMask& mask, DType dtype);
std::vector<std::byte> serialize_nifti(const VoxelVolume& volume, DType dtype);
std::vector<std::byte> serialize_nifti(const LabelMask& mask, DType dtype);

// Throws DimsMismatch or SpacingMismatch (relative tolerance 1e-6 per axis).
void validate_alignment(const VoxelVolume& volume, const LabelMask& mask);

// Throws IndexOutOfRange.
SliceRaster extract_slice(const LabelMask& mask, Axis axis, int index);

// Validates the structural invariants shared by both image kinds.
void check_invariants(const VoxelVolume& volume);
void check_invariants(const LabelMask& mask);

std::span<const std::byte> as_bytes(std::string_view s) noexcept;

}  // namespace reportpilot::imaging
