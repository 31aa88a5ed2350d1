#pragma once

// Independent reference computations used by tests. Nothing here calls the
// library code it checks.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "reportpilot/imaging.hpp"

namespace oracle {

using reportpilot::imaging::Dims;
using reportpilot::imaging::LabelMask;
using reportpilot::imaging::Modality;
using reportpilot::imaging::VoxelVolume;

// Random volume + mask with labels {0, 1, 2}, dims in [1, max_dim].
inline std::pair<VoxelVolume, LabelMask> random_pair(std::mt19937& rng, int max_dim) {
  const Dims d{1 + static_cast<int>(rng() % static_cast<unsigned>(max_dim)),
               1 + static_cast<int>(rng() % static_cast<unsigned>(max_dim)),
               1 + static_cast<int>(rng() % static_cast<unsigned>(max_dim))};
  const double spacings[] = {0.5, 0.75, 1.0, 1.25, 2.0, 3.0};
  const std::array<double, 3> sp{spacings[rng() % 6], spacings[rng() % 6], spacings[rng() % 6]};
  VoxelVolume v{d, sp, Modality::CT, std::vector<float>(d.count())};
  LabelMask m{d, sp, std::vector<std::uint32_t>(d.count()), {{1, "kidney_left"}, {2, "kidney_right"}}};
  const unsigned density = 1 + rng() % 4;
  for (std::size_t i = 0; i < d.count(); ++i) {
    v.data[i] = static_cast<float>(static_cast<int>(rng() % 400) - 100);
    m.labels[i] = (rng() % 5 < density) ? 1 + rng() % 2 : 0;
  }
  return {v, m};
}

inline std::int64_t count_voxels(const LabelMask& m, std::uint32_t label) {
  std::int64_t n = 0;
  for (int z = 0; z < m.dims.nz; ++z)
    for (int y = 0; y < m.dims.ny; ++y)
      for (int x = 0; x < m.dims.nx; ++x)
        if (m.labels[(static_cast<std::size_t>(z) * m.dims.ny + y) * m.dims.nx + x] == label) ++n;
  return n;
}

// Enumerates all six faces of each labeled voxel. Face areas are summed per
// orientation class as exact integer counts, then scaled once.
inline double surface_area(const LabelMask& m, std::uint32_t label) {
  auto at = [&](int x, int y, int z) -> std::uint32_t {
    if (x < 0 || y < 0 || z < 0 || x >= m.dims.nx || y >= m.dims.ny || z >= m.dims.nz) return 0;
    return m.labels[(static_cast<std::size_t>(z) * m.dims.ny + y) * m.dims.nx + x];
  };
  std::int64_t fx = 0, fy = 0, fz = 0;
  const int dirs[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int z = 0; z < m.dims.nz; ++z)
    for (int y = 0; y < m.dims.ny; ++y)
      for (int x = 0; x < m.dims.nx; ++x) {
        if (at(x, y, z) != label) continue;
        for (const auto& d : dirs) {
          if (at(x + d[0], y + d[1], z + d[2]) == label) continue;
          if (d[0] != 0) ++fx;
          else if (d[1] != 0) ++fy;
          else ++fz;
        }
      }
  const auto& s = m.spacing;
  return static_cast<double>(fx) * (s[1] * s[2]) + static_cast<double>(fy) * (s[0] * s[2]) +
         static_cast<double>(fz) * (s[0] * s[1]);
}

// Copies the pair into a larger grid, offset by (ox, oy, oz).
inline std::pair<VoxelVolume, LabelMask> padded(const VoxelVolume& v, const LabelMask& m, int ox, int oy, int oz) {
  const Dims d{v.dims.nx + ox + 1, v.dims.ny + oy + 2, v.dims.nz + oz};
  VoxelVolume pv{d, v.spacing, v.modality, std::vector<float>(d.count(), -1000.0f)};
  LabelMask pm{d, m.spacing, std::vector<std::uint32_t>(d.count(), 0), m.label_table};
  for (int z = 0; z < v.dims.nz; ++z)
    for (int y = 0; y < v.dims.ny; ++y)
      for (int x = 0; x < v.dims.nx; ++x) {
        pv.data[d.index(x + ox, y + oy, z + oz)] = v.data[v.dims.index(x, y, z)];
        pm.labels[d.index(x + ox, y + oy, z + oz)] = m.labels[m.dims.index(x, y, z)];
      }
  return {pv, pm};
}

// Longest common subsequence by enumerating every subsequence of the
// shorter list (lists of at most ~12 tokens).
inline std::size_t lcs_brute(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const auto& s = a.size() <= b.size() ? a : b;
  const auto& t = a.size() <= b.size() ? b : a;
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << s.size()); ++mask) {
    const auto len = static_cast<std::size_t>(__builtin_popcount(mask));
    if (len <= best) continue;
    std::size_t j = 0;
    bool ok = true;
    for (std::size_t i = 0; i < s.size() && ok; ++i) {
      if (!(mask & (1u << i))) continue;
      while (j < t.size() && t[j] != s[i]) ++j;
      if (j == t.size()) ok = false;
      else ++j;
    }
    if (ok) best = len;
  }
  return best;
}

}  // namespace oracle
