#include "reportpilot/radiomics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "reportpilot/error.hpp"

namespace reportpilot::radiomics {

using imaging::LabelMask;
using imaging::VoxelVolume;

double sphericity_from(double volume_mm3, double surface_mm2) {
  return std::cbrt(std::numbers::pi) * std::pow(6.0 * volume_mm3, 2.0 / 3.0) / surface_mm2;
}

int histogram_bin(double hu) noexcept {
  const double b = std::floor((hu - kHistogramOrigin) / kHistogramBinWidth);
  if (!(b >= 0)) return 0;
  if (b >= kHistogramBins) return kHistogramBins - 1;
  return static_cast<int>(b);
}

OrganFeatureSet compute_features(const VoxelVolume& volume, const LabelMask& mask,
                                 std::uint32_t label_id) {
  try {
    imaging::validate_alignment(volume, mask);
  } catch (const Error& e) {
    throw Error(Errc::MisalignedInputs, std::string(e.name()));
  }
  const auto organ = mask.label_table.find(label_id);
  if (label_id == 0 || organ == mask.label_table.end())
    throw Error(Errc::LabelAbsent, "label " + std::to_string(label_id) + " not in label table");

  const auto& d = mask.dims;
  const auto& s = mask.spacing;
  const double face_x = s[1] * s[2];  // face normal to x
  const double face_y = s[0] * s[2];
  const double face_z = s[0] * s[1];

  auto labeled = [&](int x, int y, int z) {
    return x >= 0 && y >= 0 && z >= 0 && x < d.nx && y < d.ny && z < d.nz &&
           mask.at(x, y, z) == label_id;
  };

  std::int64_t count = 0;
  std::int64_t faces_x = 0, faces_y = 0, faces_z = 0;
  int lo[3] = {d.nx, d.ny, d.nz};
  int hi[3] = {-1, -1, -1};
  double sum = 0.0;
  double lo_hu = std::numeric_limits<double>::infinity();
  double hi_hu = -std::numeric_limits<double>::infinity();
  std::vector<std::int64_t> histogram(kHistogramBins, 0);

  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        if (mask.at(x, y, z) != label_id) continue;
        ++count;
        faces_x += !labeled(x - 1, y, z) + !labeled(x + 1, y, z);
        faces_y += !labeled(x, y - 1, z) + !labeled(x, y + 1, z);
        faces_z += !labeled(x, y, z - 1) + !labeled(x, y, z + 1);
        const int c[3] = {x, y, z};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], c[a]);
          hi[a] = std::max(hi[a], c[a]);
        }
        const double v = volume.at(x, y, z);
        sum += v;
        lo_hu = std::min(lo_hu, v);
        hi_hu = std::max(hi_hu, v);
        ++histogram[static_cast<std::size_t>(histogram_bin(v))];
      }
    }
  }
  if (count == 0)
    throw Error(Errc::LabelAbsent, "label " + std::to_string(label_id) + " has no voxels");

  OrganFeatureSet f;
  f.organ = organ->second;
  f.label_id = label_id;
  f.voxel_count = count;
  const double voxel_mm3 = s[0] * s[1] * s[2];
  f.volume_cm3 = static_cast<double>(count) * voxel_mm3 / 1000.0;
  f.surface_area_mm2 = static_cast<double>(faces_x) * face_x +
                       static_cast<double>(faces_y) * face_y +
                       static_cast<double>(faces_z) * face_z;
  f.sphericity = sphericity_from(static_cast<double>(count) * voxel_mm3, f.surface_area_mm2);
  for (int a = 0; a < 3; ++a) f.bbox_mm[a] = (hi[a] - lo[a] + 1) * s[a];

  const double n = static_cast<double>(count);
  f.intensity_mean = sum / n;
  double ss = 0.0;
  for (int z = lo[2]; z <= hi[2]; ++z) {
    for (int y = lo[1]; y <= hi[1]; ++y) {
      for (int x = lo[0]; x <= hi[0]; ++x) {
        if (mask.at(x, y, z) != label_id) continue;
        const double dv = volume.at(x, y, z) - f.intensity_mean;
        ss += dv * dv;
      }
    }
  }
  f.intensity_std = std::sqrt(ss / n);
  f.intensity_min = lo_hu;
  f.intensity_max = hi_hu;
  // Guard mean against summation drift past the observed extremes.
  f.intensity_mean = std::clamp(f.intensity_mean, lo_hu, hi_hu);

  double entropy = 0.0;
  for (auto c : histogram) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    entropy -= p * std::log2(p);
  }
  f.intensity_entropy = entropy > 0.0 ? entropy : 0.0;
  return f;
}

OrganFeatureSet compute_features(const VoxelVolume& volume, const LabelMask& mask,
                                 std::string_view organ) {
  const auto id = mask.find_label(organ);
  if (id == 0) throw Error(Errc::LabelAbsent, "organ '" + std::string(organ) + "' not in label table");
  return compute_features(volume, mask, id);
}

LateralityRatio paired_ratio(const OrganFeatureSet& left, const OrganFeatureSet& right) {
  if (!(left.volume_cm3 > 0) || !(right.volume_cm3 > 0)) throw Error(Errc::ZeroVolume);
  return {left.volume_cm3, right.volume_cm3, left.volume_cm3 / right.volume_cm3};
}

void to_json(nlohmann::json& j, const OrganFeatureSet& f) {
  j = nlohmann::json{{"organ", f.organ},
                     {"label_id", f.label_id},
                     {"voxel_count", f.voxel_count},
                     {"volume_cm3", f.volume_cm3},
                     {"surface_area_mm2", f.surface_area_mm2},
                     {"sphericity", f.sphericity},
                     {"bbox_mm", f.bbox_mm},
                     {"intensity_mean", f.intensity_mean},
                     {"intensity_std", f.intensity_std},
                     {"intensity_min", f.intensity_min},
                     {"intensity_max", f.intensity_max},
                     {"intensity_entropy", f.intensity_entropy}};
}

void from_json(const nlohmann::json& j, OrganFeatureSet& f) {
  j.at("organ").get_to(f.organ);
  f.label_id = j.value("label_id", std::uint32_t{0});
  j.at("voxel_count").get_to(f.voxel_count);
  j.at("volume_cm3").get_to(f.volume_cm3);
  j.at("surface_area_mm2").get_to(f.surface_area_mm2);
  j.at("sphericity").get_to(f.sphericity);
  j.at("bbox_mm").get_to(f.bbox_mm);
  j.at("intensity_mean").get_to(f.intensity_mean);
  j.at("intensity_std").get_to(f.intensity_std);
  j.at("intensity_min").get_to(f.intensity_min);
  j.at("intensity_max").get_to(f.intensity_max);
  j.at("intensity_entropy").get_to(f.intensity_entropy);
}

void to_json(nlohmann::json& j, const LateralityRatio& r) {
  j = nlohmann::json{{"left_volume_cm3", r.left_volume_cm3},
                     {"right_volume_cm3", r.right_volume_cm3},
                     {"ratio", r.ratio}};
}

void from_json(const nlohmann::json& j, LateralityRatio& r) {
  j.at("left_volume_cm3").get_to(r.left_volume_cm3);
  j.at("right_volume_cm3").get_to(r.right_volume_cm3);
  j.at("ratio").get_to(r.ratio);
}

}  // namespace reportpilot::radiomics
