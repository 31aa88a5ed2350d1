#include "reportpilot/imaging.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "json.hpp"
#include "reportpilot/error.hpp"

namespace reportpilot::imaging {

using json = nlohmann::json;

namespace {

constexpr std::size_t kNiftiHeaderSize = 348;
constexpr std::size_t kNiftiDataOffset = 352;
constexpr std::int16_t kNiftiUint8 = 2;
constexpr std::int16_t kNiftiInt16 = 4;
constexpr std::int16_t kNiftiFloat32 = 16;

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::U8: return 1;
    case DType::I16: return 2;
    case DType::F32: return 4;
  }
  return 0;
}

std::int16_t nifti_code(DType d) {
  switch (d) {
    case DType::U8: return kNiftiUint8;
    case DType::I16: return kNiftiInt16;
    case DType::F32: return kNiftiFloat32;
  }
  return 0;
}

// Byte reader honoring the file's endianness regardless of the host.
class ByteReader {
 public:
  ByteReader(std::span<const std::byte> bytes, bool big_endian)
      : bytes_(bytes), big_(big_endian) {}

  std::uint32_t u32(std::size_t off) const { return static_cast<std::uint32_t>(load(off, 4)); }
  std::int16_t i16(std::size_t off) const {
    return static_cast<std::int16_t>(static_cast<std::uint16_t>(load(off, 2)));
  }
  float f32(std::size_t off) const { return std::bit_cast<float>(u32(off)); }

 private:
  std::uint64_t load(std::size_t off, std::size_t n) const {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto b = static_cast<std::uint64_t>(bytes_[off + i]);
      v |= big_ ? b << (8 * (n - 1 - i)) : b << (8 * i);
    }
    return v;
  }

  std::span<const std::byte> bytes_;
  bool big_;
};

void put_le(std::vector<std::byte>& out, std::size_t off, std::uint64_t v, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[off + i] = static_cast<std::byte>((v >> (8 * i)) & 0xff);
}

// Decodes `count` little- or big-endian samples of `dtype` starting at `off`.
std::vector<double> decode_samples(const ByteReader& r, std::size_t off, std::size_t count,
                                   DType dtype, std::span<const std::byte> bytes) {
  std::vector<double> out(count);
  switch (dtype) {
    case DType::U8:
      for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<double>(bytes[off + i]);
      break;
    case DType::I16:
      for (std::size_t i = 0; i < count; ++i) out[i] = r.i16(off + 2 * i);
      break;
    case DType::F32:
      for (std::size_t i = 0; i < count; ++i) out[i] = r.f32(off + 4 * i);
      break;
  }
  return out;
}

std::vector<std::byte> encode_samples(std::span<const double> values, DType dtype) {
  std::vector<std::byte> out(values.size() * dtype_size(dtype));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    switch (dtype) {
      case DType::U8:
        if (!(v >= 0 && v <= 255) || v != std::floor(v))
          throw Error(Errc::InvalidArgument, "value not representable as u8");
        out[i] = static_cast<std::byte>(static_cast<std::uint8_t>(v));
        break;
      case DType::I16:
        if (!(v >= -32768 && v <= 32767) || v != std::floor(v))
          throw Error(Errc::InvalidArgument, "value not representable as i16");
        put_le(out, 2 * i, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)), 2);
        break;
      case DType::F32:
        put_le(out, 4 * i, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
        break;
    }
  }
  return out;
}

std::vector<std::uint32_t> to_labels(const std::vector<double>& samples) {
  std::vector<std::uint32_t> labels(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i] < 0) throw Error(Errc::UnknownLabel, "negative label value");
    labels[i] = static_cast<std::uint32_t>(samples[i]);
  }
  return labels;
}

double checked_spacing(double v) {
  v = std::fabs(v);
  if (!(v > 0) || !std::isfinite(v)) throw Error(Errc::NonPositiveSpacing);
  return v;
}

LabelTable parse_label_table(const json& j) {
  if (!j.is_object()) throw Error(Errc::MalformedHeader, "labels must be an object");
  LabelTable table;
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::size_t pos = 0;
    long id = 0;
    try {
      id = std::stol(it.key(), &pos);
    } catch (const std::exception&) {
      throw Error(Errc::MalformedHeader, "label key '" + it.key() + "' is not an integer");
    }
    if (pos != it.key().size() || id < 1 || id > std::numeric_limits<std::uint32_t>::max())
      throw Error(Errc::MalformedHeader, "label key '" + it.key() + "' must be >= 1");
    if (!it.value().is_string()) throw Error(Errc::MalformedHeader, "label names must be strings");
    table[static_cast<std::uint32_t>(id)] = it.value().get<std::string>();
  }
  return table;
}

std::vector<double> as_doubles(const std::vector<float>& v) { return {v.begin(), v.end()}; }
std::vector<double> as_doubles(const std::vector<std::uint32_t>& v) { return {v.begin(), v.end()}; }

json header_json(const Dims& d, const Spacing& s, DType dtype) {
  return json{{"dims", {d.nx, d.ny, d.nz}}, {"spacing", {s[0], s[1], s[2]}},
              {"dtype", dtype_name(dtype)}};
}

std::vector<std::byte> nifti_bytes(const Dims& d, const Spacing& s, DType dtype,
                                   std::span<const double> values) {
  std::vector<std::byte> out(kNiftiDataOffset, std::byte{0});
  put_le(out, 0, kNiftiHeaderSize, 4);
  const std::int16_t dim[8] = {3, static_cast<std::int16_t>(d.nx), static_cast<std::int16_t>(d.ny),
                               static_cast<std::int16_t>(d.nz), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put_le(out, 40 + 2 * i, static_cast<std::uint16_t>(dim[i]), 2);
  put_le(out, 70, static_cast<std::uint16_t>(nifti_code(dtype)), 2);
  put_le(out, 72, static_cast<std::uint16_t>(8 * dtype_size(dtype)), 2);
  const float pixdim[8] = {1.0f, static_cast<float>(s[0]), static_cast<float>(s[1]),
                           static_cast<float>(s[2]), 1.0f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 8; ++i) put_le(out, 76 + 4 * i, std::bit_cast<std::uint32_t>(pixdim[i]), 4);
  put_le(out, 108, std::bit_cast<std::uint32_t>(static_cast<float>(kNiftiDataOffset)), 4);
  std::memcpy(out.data() + 344, "n+1\0", 4);
  const auto payload = encode_samples(values, dtype);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

}  // namespace

LabelTable parse_label_table(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(Errc::MalformedHeader, std::string("labels: ") + e.what());
  }
  if (j.is_object() && j.contains("labels")) return parse_label_table(j["labels"]);
  return parse_label_table(j);
}

std::string modality_name(Modality m) {
  switch (m) {
    case Modality::CT: return "CT";
    case Modality::XR: return "XR";
    case Modality::Other: return "OTHER";
  }
  return "OTHER";
}

Modality parse_modality(std::string_view name) {
  if (name == "CT" || name == "ct") return Modality::CT;
  if (name == "XR" || name == "xr") return Modality::XR;
  if (name == "OTHER" || name == "other") return Modality::Other;
  throw Error(Errc::MalformedHeader, "unknown modality '" + std::string(name) + "'");
}

std::string dtype_name(DType d) {
  switch (d) {
    case DType::U8: return "u8";
    case DType::I16: return "i16";
    case DType::F32: return "f32";
  }
  return "";
}

Axis parse_axis(std::string_view name) {
  if (name == "x" || name == "X") return Axis::X;
  if (name == "y" || name == "Y") return Axis::Y;
  if (name == "z" || name == "Z") return Axis::Z;
  throw Error(Errc::InvalidArgument, "unknown axis '" + std::string(name) + "'");
}

std::uint32_t LabelMask::find_label(std::string_view organ) const {
  for (const auto& [id, name] : label_table) {
    if (name == organ) return id;
  }
  return 0;
}

std::span<const std::byte> as_bytes(std::string_view s) noexcept {
  return {reinterpret_cast<const std::byte*>(s.data()), s.size()};
}

Image parse_nifti(std::span<const std::byte> bytes, const NiftiOptions& options) {
  if (bytes.size() < kNiftiHeaderSize) throw Error(Errc::TruncatedData, "header truncated");

  bool big_endian = false;
  if (ByteReader(bytes, false).u32(0) != kNiftiHeaderSize) {
    if (ByteReader(bytes, true).u32(0) != kNiftiHeaderSize)
      throw Error(Errc::BadMagic, "sizeof_hdr is not 348");
    big_endian = true;
  }
  if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0)
    throw Error(Errc::BadMagic, "expected single-file magic n+1");
  const ByteReader r(bytes, big_endian);

  const int rank = r.i16(40);
  if (rank < 1 || rank > 7) throw Error(Errc::MalformedHeader, "dim[0] out of range");
  int dim[8] = {rank, 1, 1, 1, 1, 1, 1, 1};
  for (int i = 1; i <= rank; ++i) {
    dim[i] = r.i16(40 + 2 * i);
    if (dim[i] < 1) throw Error(Errc::MalformedHeader, "non-positive dimension");
  }
  for (int i = 4; i <= rank; ++i) {
    if (dim[i] != 1) throw Error(Errc::MalformedHeader, "only 3-D volumes are supported");
  }

  DType dtype;
  switch (r.i16(70)) {
    case kNiftiUint8: dtype = DType::U8; break;
    case kNiftiInt16: dtype = DType::I16; break;
    case kNiftiFloat32: dtype = DType::F32; break;
    default: throw Error(Errc::UnsupportedDatatype, "datatype code " + std::to_string(r.i16(70)));
  }

  Spacing spacing{};
  for (int i = 0; i < 3; ++i) {
    // Dimensions beyond the file's rank carry no spacing information.
    spacing[i] = (i + 1 <= rank) ? checked_spacing(r.f32(76 + 4 * (i + 1))) : 1.0;
  }

  const Dims dims{dim[1], dim[2], dim[3]};
  const float vox_offset = r.f32(108);
  std::size_t offset = kNiftiDataOffset;
  if (std::isfinite(vox_offset) && vox_offset > static_cast<float>(kNiftiDataOffset))
    offset = static_cast<std::size_t>(vox_offset);
  const std::size_t payload = dims.count() * dtype_size(dtype);
  if (bytes.size() < offset || bytes.size() - offset < payload)
    throw Error(Errc::TruncatedData, "payload has " +
                                         std::to_string(bytes.size() > offset ? bytes.size() - offset : 0) +
                                         " bytes, need " + std::to_string(payload));

  auto samples = decode_samples(r, offset, dims.count(), dtype, bytes);

  if (options.as_mask) {
    if (dtype == DType::F32) throw Error(Errc::MaskDtypeNotInteger);
    LabelMask mask{dims, spacing, to_labels(samples), options.label_table};
    check_invariants(mask);
    return mask;
  }

  const float slope = r.f32(112);
  const float inter = r.f32(116);
  VoxelVolume volume{dims, spacing, options.modality, {}};
  volume.data.resize(samples.size());
  const bool scaled = slope != 0.0f && std::isfinite(slope) && std::isfinite(inter);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    volume.data[i] = static_cast<float>(scaled ? samples[i] * slope + inter : samples[i]);
  }
  return volume;
}

VoxelVolume parse_nifti_volume(std::span<const std::byte> bytes, Modality modality) {
  return std::get<VoxelVolume>(parse_nifti(bytes, {false, {}, modality}));
}

LabelMask parse_nifti_mask(std::span<const std::byte> bytes, const LabelTable& table) {
  return std::get<LabelMask>(parse_nifti(bytes, {true, table, Modality::CT}));
}

Image parse_raw(std::string_view header_json_text, std::span<const std::byte> data) {
  json h;
  try {
    h = json::parse(header_json_text);
  } catch (const json::exception& e) {
    throw Error(Errc::MalformedHeader, e.what());
  }
  if (!h.is_object()) throw Error(Errc::MalformedHeader, "header must be an object");

  Dims dims;
  Spacing spacing{};
  DType dtype;
  std::string kind;
  try {
    const auto& d = h.at("dims");
    const auto& s = h.at("spacing");
    if (!d.is_array() || d.size() != 3 || !s.is_array() || s.size() != 3)
      throw Error(Errc::MalformedHeader, "dims and spacing must be 3-element arrays");
    dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
    for (int i = 0; i < 3; ++i) {
      spacing[i] = s[i].get<double>();
      if (!(spacing[i] > 0)) throw Error(Errc::NonPositiveSpacing);
    }
    const auto dt = h.at("dtype").get<std::string>();
    if (dt == "u8") dtype = DType::U8;
    else if (dt == "i16") dtype = DType::I16;
    else if (dt == "f32") dtype = DType::F32;
    else throw Error(Errc::UnsupportedDatatype, dt);
    kind = h.value("kind", std::string("image"));
  } catch (const json::exception& e) {
    throw Error(Errc::MalformedHeader, e.what());
  }
  if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1)
    throw Error(Errc::MalformedHeader, "dims must be >= 1");
  if (kind != "image" && kind != "mask") throw Error(Errc::MalformedHeader, "unknown kind " + kind);

  const std::size_t expected = dims.count() * dtype_size(dtype);
  if (data.size() != expected)
    throw Error(Errc::LengthMismatch,
                "data has " + std::to_string(data.size()) + " bytes, need " + std::to_string(expected));
  const auto samples = decode_samples(ByteReader(data, false), 0, dims.count(), dtype, data);

  if (kind == "mask") {
    if (dtype == DType::F32) throw Error(Errc::MaskDtypeNotInteger);
    if (!h.contains("labels")) throw Error(Errc::MalformedHeader, "mask requires labels");
    LabelMask mask{dims, spacing, to_labels(samples), parse_label_table(h["labels"])};
    check_invariants(mask);
    return mask;
  }

  Modality modality = Modality::CT;
  if (h.contains("modality")) {
    if (!h["modality"].is_string()) throw Error(Errc::MalformedHeader, "modality must be a string");
    modality = parse_modality(h["modality"].get<std::string>());
  }
  VoxelVolume volume{dims, spacing, modality, std::vector<float>(samples.size())};
  for (std::size_t i = 0; i < samples.size(); ++i) volume.data[i] = static_cast<float>(samples[i]);
  return volume;
}

RawFiles serialize_raw(const VoxelVolume& volume, DType dtype) {
  check_invariants(volume);
  auto h = header_json(volume.dims, volume.spacing, dtype);
  h["kind"] = "image";
  h["modality"] = modality_name(volume.modality);
  return {h.dump(), encode_samples(as_doubles(volume.data), dtype)};
}

RawFiles serialize_raw(const LabelMask& mask, DType dtype) {
  check_invariants(mask);
  if (dtype == DType::F32) throw Error(Errc::MaskDtypeNotInteger);
  auto h = header_json(mask.dims, mask.spacing, dtype);
  h["kind"] = "mask";
  json labels = json::object();
  for (const auto& [id, name] : mask.label_table) labels[std::to_string(id)] = name;
  h["labels"] = labels;
  return {h.dump(), encode_samples(as_doubles(mask.labels), dtype)};
}

std::vector<std::byte> serialize_nifti(const VoxelVolume& volume, DType dtype) {
  check_invariants(volume);
  return nifti_bytes(volume.dims, volume.spacing, dtype, as_doubles(volume.data));
}

std::vector<std::byte> serialize_nifti(const LabelMask& mask, DType dtype) {
  check_invariants(mask);
  if (dtype == DType::F32) throw Error(Errc::MaskDtypeNotInteger);
  return nifti_bytes(mask.dims, mask.spacing, dtype, as_doubles(mask.labels));
}

void validate_alignment(const VoxelVolume& volume, const LabelMask& mask) {
  if (!(volume.dims == mask.dims)) throw Error(Errc::DimsMismatch);
  for (int i = 0; i < 3; ++i) {
    const double a = volume.spacing[i], b = mask.spacing[i];
    if (std::fabs(a - b) > 1e-6 * std::max(std::fabs(a), std::fabs(b)))
      throw Error(Errc::SpacingMismatch, "axis " + std::to_string(i));
  }
}

SliceRaster extract_slice(const LabelMask& mask, Axis axis, int index) {
  const Dims& d = mask.dims;
  if (index < 0 || index >= d.extent(axis))
    throw Error(Errc::IndexOutOfRange, "index " + std::to_string(index) + " outside [0, " +
                                           std::to_string(d.extent(axis)) + ")");
  SliceRaster s;
  s.axis = axis;
  s.index = index;
  switch (axis) {
    case Axis::X: s.width = d.ny; s.height = d.nz; break;
    case Axis::Y: s.width = d.nx; s.height = d.nz; break;
    case Axis::Z: s.width = d.nx; s.height = d.ny; break;
  }
  s.labels.resize(static_cast<std::size_t>(s.width) * static_cast<std::size_t>(s.height));
  for (int v = 0; v < s.height; ++v) {
    for (int u = 0; u < s.width; ++u) {
      std::uint32_t label = 0;
      switch (axis) {
        case Axis::X: label = mask.at(index, u, v); break;
        case Axis::Y: label = mask.at(u, index, v); break;
        case Axis::Z: label = mask.at(u, v, index); break;
      }
      s.labels[static_cast<std::size_t>(v) * static_cast<std::size_t>(s.width) +
               static_cast<std::size_t>(u)] = label;
    }
  }
  return s;
}

namespace {
void check_geometry(const Dims& d, const Spacing& s, std::size_t length) {
  if (d.nx < 1 || d.ny < 1 || d.nz < 1) throw Error(Errc::MalformedHeader, "dims must be >= 1");
  for (double v : s) {
    if (!(v > 0)) throw Error(Errc::NonPositiveSpacing);
  }
  if (length != d.count()) throw Error(Errc::LengthMismatch);
}
}  // namespace

void check_invariants(const VoxelVolume& volume) {
  check_geometry(volume.dims, volume.spacing, volume.data.size());
}

void check_invariants(const LabelMask& mask) {
  check_geometry(mask.dims, mask.spacing, mask.labels.size());
  if (mask.label_table.contains(0)) throw Error(Errc::UnknownLabel, "label 0 is reserved");
  std::uint32_t last = 0;
  for (auto v : mask.labels) {
    if (v == 0 || v == last) continue;
    if (!mask.label_table.contains(v))
      throw Error(Errc::UnknownLabel, "label " + std::to_string(v) + " missing from label table");
    last = v;
  }
}

}  // namespace reportpilot::imaging
