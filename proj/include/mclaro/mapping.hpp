#pragma once

#include <optional>

#include "mclaro/array.hpp"
#include "mclaro/phantom.hpp"
#include "mclaro/seqsim.hpp"

namespace mclaro::mapping {

struct QuantMaps {
  RGrid t1_ms, t2_ms, t2s_ms, chi_ppm;
  MaskGrid valid;
};

// Signed 4-point signal against the unit-norm dictionary; exhaustive inner
// product search. Returns nothing when the signal has no usable norm.
std::optional<std::pair<double, double>> match_voxel(
    const std::array<double, 4>& signal, const seqsim::Dictionary& dict);

// ARLO: Simpson integrals s_i over echo triplets obey s_i ~ T2* (y_i -
// y_{i+2}) for a mono-exponential; least-squares slope through the origin.
// Result clamped to [1, 2000] ms; invalid (nullopt) on degenerate input.
std::optional<double> fit_t2star_arlo(const std::vector<double>& magnitudes,
                                      double delta_te_ms);

struct FieldFit {
  double f_hz = 0;
  double phi0_rad = 0;
};

// Temporal unwrapping driven by a running field estimate seeded from the
// first echo, then a magnitude^2-weighted linear fit of phase vs TE.
std::optional<FieldFit> fit_total_field(const std::vector<double>& phases_rad,
                                        const std::vector<double>& magnitudes,
                                        const std::vector<double>& te_ms);

// Projection onto dipole fields: fit exterior susceptibility sources to the
// measured field and subtract their contribution inside the mask.
RGrid remove_background_pdf(const RGrid& field_hz, const MaskGrid& brain_mask,
                            const std::array<double, 3>& voxel_mm,
                            const std::array<double, 3>& b0_dir,
                            int cg_iters = 30);

// Thresholded k-space division dipole inversion.
RGrid dipole_invert_tkd(const RGrid& local_field_hz,
                        const MaskGrid& brain_mask,
                        const std::array<double, 3>& voxel_mm,
                        const std::array<double, 3>& b0_dir, double threshold,
                        double hz_per_ppm);

struct MappingConfig {
  double tkd_threshold = 0.2;
  double hz_per_ppm = phantom::kDefaultHzPerPpm;
  int pdf_cg_iters = 30;
  int threads = 1;
};

// Full chain: dictionary-matched T1/T2 from the phase-corrected 4-point
// signals, ARLO T2* from echo magnitudes, chi from the mGRE phases via
// field fit -> background removal -> TKD.
QuantMaps derive_all_maps(const seqsim::ContrastImageSet& images,
                          const MaskGrid& brain_mask,
                          const std::array<double, 3>& voxel_mm,
                          const std::array<double, 3>& b0_dir,
                          const seqsim::SequenceParams& seq,
                          const seqsim::Dictionary& dict,
                          const MappingConfig& cfg);

}  // namespace mclaro::mapping
