#pragma once

#include <array>
#include <vector>

#include "mclaro/array.hpp"
#include "mclaro/phantom.hpp"
#include "mclaro/rng.hpp"

namespace mclaro::seqsim {

// One repetition: inversion -> IR single-echo block -> multi-echo block ->
// second IR single-echo block -> T2prep -> T2prep single-echo block.
// Ordering strategies: IR blocks in-and-out, multi-echo reverse-centric,
// T2prep centric, so the k-space-center TR is mid/last/first respectively.
enum class Block { ir1 = 0, mgre = 1, ir2 = 2, t2prep = 3 };
inline constexpr int kNumBlocks = 4;

struct SequenceParams {
  double flip_deg = 8.0;
  double tr_gre_ms = 7.8;
  double tr_mgre_ms = 41.6;
  double te_gre_ms = 2.9;
  std::vector<double> te_mgre_ms = {2.9, 7.7, 12.5, 17.4,
                                    22.2, 27.0, 31.8, 36.7};
  double t2prep_te_ms = 85.0;
  int trs_per_segment = 128;
  double inversion_efficiency = 1.0;
  std::array<double, 4> td_ms{0, 0, 0, 0};  // delay before each block

  int n_echoes() const { return (int)te_mgre_ms.size(); }
  int n_contrasts() const { return n_echoes() + 3; }
  // Mean echo spacing; individual spacings may carry ~1% rounding from the
  // protocol table and are validated to be constant within 3%.
  double delta_te_ms() const;
  void validate() const;
};

// Contrast index convention (0-based): 0..N_E-1 the multi-echo images,
// N_E and N_E+1 the two inversion-recovery single-echo images, N_E+2 the
// T2prep single-echo image.
inline int contrast_of_block(Block b, const SequenceParams& seq) {
  switch (b) {
    case Block::ir1: return seq.n_echoes();
    case Block::ir2: return seq.n_echoes() + 1;
    case Block::t2prep: return seq.n_echoes() + 2;
    case Block::mgre: return -1;  // shared by all echoes
  }
  return -1;
}

int center_tr_index(Block b, int n_trs);

struct Tissue {
  double t1_ms = 0;
  double t2_ms = 0;
  double m0 = 1.0;
};

struct MzTimeline {
  std::array<double, kNumBlocks> mz_block_start{};
  std::array<double, kNumBlocks> signal_at_center{};  // signed Mxy at center TR
};

MzTimeline steady_state_mz(const Tissue& tissue, const SequenceParams& seq);

double repetition_duration_s(const SequenceParams& seq);

// 4-point signature (IR1, mGRE, IR2, T2prep block amplitudes) used by the
// matching dictionary; unnormalized.
std::array<double, 4> block_signature(const Tissue& tissue,
                                      const SequenceParams& seq);

struct Dictionary {
  RGrid atoms;                 // (n_atoms, 4), unit l2 rows
  std::vector<double> t1_ms;   // per atom
  std::vector<double> t2_ms;   // per atom
  std::vector<double> t1_grid;
  std::vector<double> t2_grid;
};

std::vector<double> default_t1_grid();  // 100:10:2000 ms
std::vector<double> default_t2_grid();  // 10:1:200 ms

Dictionary build_dictionary(const SequenceParams& seq,
                            const std::vector<double>& t1_grid,
                            const std::vector<double>& t2_grid);

struct ContrastImageSet {
  std::vector<CGrid> images;  // n_contrasts volumes (nx, ny, nz)
  int n_echoes = 0;
  int n_contrasts() const { return (int)images.size(); }
};

ContrastImageSet simulate_contrasts(const phantom::TissuePhantom& ph,
                                    const SequenceParams& seq,
                                    const RGrid& field_hz);

struct KSpaceSet {
  // [contrast][coil] volumes; each x-slab holds the centered 2-d FFT of
  // the coil-weighted image slice over (k_y, k_z).
  std::vector<std::vector<CGrid>> data;
};

KSpaceSet synthesize_kspace(const ContrastImageSet& images,
                            const phantom::CoilSet& coils, double noise_sigma,
                            std::uint64_t seed);

}  // namespace mclaro::seqsim
