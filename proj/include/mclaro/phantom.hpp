#pragma once

#include <array>
#include <map>
#include <string>

#include "mclaro/array.hpp"
#include "mclaro/rng.hpp"

namespace mclaro::phantom {

struct TissueClass {
  std::string name;
  double t1_ms = 0;
  double t2_ms = 0;
  double t2s_ms = 0;
  double m0 = 1.0;
  double chi_ppm = 0;
};

enum class Geometry { brain, uniform };

struct PhantomSpec {
  std::vector<int> dims;  // (nx, ny, nz); slices along x, k_y-k_z plane is (y, z)
  std::uint64_t seed = 0;
  std::array<double, 3> voxel_mm{1.0, 1.0, 1.0};
  std::array<double, 3> b0_dir{0.0, 0.0, 1.0};
  Geometry geometry = Geometry::brain;
  std::map<int, TissueClass> classes;  // label -> tissue; label 0 is background

  // WM/GM/CSF relaxation times from the reference tissue set; T2*/chi/M0
  // are simulation configuration, not literature claims.
  static std::map<int, TissueClass> default_classes();
  static PhantomSpec brain_default(std::vector<int> dims, std::uint64_t seed);
};

// Labels: 0 background, 1 WM, 2 GM, 3 CSF, 4/5 deep-gray blobs.
struct TissuePhantom {
  LabelGrid labels;
  std::map<int, TissueClass> classes;
  MaskGrid brain_mask;
  std::array<double, 3> voxel_mm;
  std::array<double, 3> b0_dir;
  std::uint64_t seed = 0;

  RGrid class_map(double TissueClass::*field) const;  // per-voxel parameter volume
  const TissueClass& tissue(int label) const { return classes.at(label); }
};

TissuePhantom make_phantom(const PhantomSpec& spec);

struct CoilSet {
  std::vector<CGrid> sens;  // per coil, (nx, ny, nz)
  int n_coils = 0;
};

CoilSet synthesize_coils(const std::vector<int>& dims, int n_coils,
                         std::uint64_t seed, bool flat = false);

// Unit-free dipole kernel 1/3 - (k.b)^2/|k|^2 on the centered frequency
// grid; D at the DC bin is 0.
RGrid dipole_kernel(const std::vector<int>& dims,
                    const std::array<double, 3>& voxel_mm,
                    const std::array<double, 3>& b0_dir);

// field_hz = hz_per_ppm * Re IFFT( D . FFT(chi) )
RGrid susceptibility_to_field(const RGrid& chi_ppm,
                              const std::array<double, 3>& voxel_mm,
                              const std::array<double, 3>& b0_dir,
                              double hz_per_ppm);

// 3 T with gamma/2pi = 42.58 MHz/T
inline constexpr double kDefaultHzPerPpm = 127.74;

}  // namespace mclaro::phantom
