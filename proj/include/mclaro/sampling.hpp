#pragma once

#include <utility>
#include <vector>

#include "mclaro/array.hpp"
#include "mclaro/rng.hpp"
#include "mclaro/seqsim.hpp"

namespace mclaro::sampling {

struct Cell {
  int ky = 0, kz = 0;
};

// Inscribed ellipse (semi-axes n/2 about the geometric grid center) tested
// on cell centers.
MaskGrid elliptical_support(int n_ky, int n_kz);

// Angularly contiguous fans about the grid center; each segment stores its
// locations center-out (ascending radius). When supply exceeds demand the
// outermost locations of each fan are dropped; in pad mode a short fan is
// filled by cycling its own lines from the innermost rank.
struct SegmentAssignment {
  std::vector<std::vector<Cell>> segments;  // [segment][rank]
  int n_ky = 0, n_kz = 0;
  int trs_per_segment = 0;

  MaskGrid cell_mask() const;  // distinct assigned cells
};

enum class PadMode { error, pad };

SegmentAssignment fanbeam_segments(const MaskGrid& support, int n_segments,
                                   int trs_per_segment,
                                   PadMode pad = PadMode::error);
SegmentAssignment fanbeam_on_cells(std::vector<Cell> cells, int n_ky, int n_kz,
                                   int n_segments, int trs_per_segment,
                                   PadMode pad);

enum class Strategy { in_and_out, reverse_centric, centric };

Strategy block_strategy(seqsim::Block b);

std::vector<Cell> order_segment(const SegmentAssignment& a, int segment,
                                Strategy strategy);

// Multi-level variable-density baseline: fully sampled innermost level,
// geometrically decreasing per-level Bernoulli densities scaled so the
// expected sampled fraction over the elliptical support equals `ratio`.
RGrid baseline_vd_density(int n_ky, int n_kz, double ratio, int n_levels);
MaskGrid baseline_vd_mask(int n_ky, int n_kz, double ratio, int n_levels,
                          Rng& rng);

// Sigmoid probability map with slope `a`, optionally renormalized so the
// mean over the support equals target_ratio. Values are kept inside
// (eps, 1-eps); off-support cells are 0.
RGrid prob_from_weights(const RGrid& w, const MaskGrid& support, double a,
                        double target_ratio, bool renormalize = true);
inline constexpr double kProbEps = 1e-4;

// Bernoulli draw U = 1{z < P}; a calib_block x calib_block region centered
// on the DC bin is forced to 1 when calib_block > 0.
MaskGrid draw_mask(const RGrid& p, Rng& rng, int calib_block);

struct ScheduleEntry {
  int repetition = 0;
  int block = 0;  // seqsim::Block
  int tr = 0;
  int ky = 0, kz = 0;
  int contrast = 0;  // -1 for multi-echo block lines (shared by all echoes)
};

struct AcquisitionSchedule {
  std::vector<ScheduleEntry> entries;
  int n_repetitions = 0;
  int trs_per_segment = 0;
  std::vector<MaskGrid> implied_masks;  // per contrast
};

// Realizes per-contrast masks as fan-beam repetitions. The multi-echo block
// acquires one line set shared by all echoes (the union of the per-echo
// masks); per-echo validity keeps the original masks.
AcquisitionSchedule schedule_undersampled(
    const std::vector<MaskGrid>& masks_per_contrast, int n_repetitions,
    const seqsim::SequenceParams& seq, const MaskGrid& support);

// The fully sampled scan: every supported location assigned by the fan-beam
// segmentation, identical for every contrast.
std::vector<MaskGrid> full_scan_masks(const MaskGrid& support,
                                      int n_repetitions, int trs_per_segment,
                                      int n_contrasts);

}  // namespace mclaro::sampling
