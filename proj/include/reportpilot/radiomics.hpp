#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "json.hpp"
#include "reportpilot/imaging.hpp"

namespace reportpilot::radiomics {

// Fixed intensity histogram used for first-order entropy: 25 HU bins anchored
// at -1024 HU, covering [-1024, 3071]. Out-of-range values clamp to end bins.
inline constexpr double kHistogramOrigin = -1024.0;
inline constexpr double kHistogramBinWidth = 25.0;
inline constexpr int kHistogramBins = 164;

struct OrganFeatureSet {
  std::string organ;
  std::uint32_t label_id = 0;
  std::int64_t voxel_count = 0;
  double volume_cm3 = 0.0;
  double surface_area_mm2 = 0.0;
  double sphericity = 0.0;
  std::array<double, 3> bbox_mm{};
  double intensity_mean = 0.0;
  double intensity_std = 0.0;
  double intensity_min = 0.0;
  double intensity_max = 0.0;
  double intensity_entropy = 0.0;
};

struct LateralityRatio {
  double left_volume_cm3 = 0.0;
  double right_volume_cm3 = 0.0;
  double ratio = 0.0;
};

// Throws MisalignedInputs (wrapping the alignment failure) or LabelAbsent.
OrganFeatureSet compute_features(const imaging::VoxelVolume& volume,
                                 const imaging::LabelMask& mask, std::uint32_t label_id);

// Convenience lookup by organ name through the mask's label table.
OrganFeatureSet compute_features(const imaging::VoxelVolume& volume,
                                 const imaging::LabelMask& mask, std::string_view organ);

// ratio = left / right. Throws ZeroVolume.
LateralityRatio paired_ratio(const OrganFeatureSet& left, const OrganFeatureSet& right);

double sphericity_from(double volume_mm3, double surface_mm2);
int histogram_bin(double hu) noexcept;

void to_json(nlohmann::json& j, const OrganFeatureSet& f);
void from_json(const nlohmann::json& j, OrganFeatureSet& f);
void to_json(nlohmann::json& j, const LateralityRatio& r);
void from_json(const nlohmann::json& j, LateralityRatio& r);

}  // namespace reportpilot::radiomics
