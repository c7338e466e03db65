#pragma once

#include "mclaro/diffkit.hpp"
#include "mclaro/sampling.hpp"
#include "mclaro/seqsim.hpp"

namespace mclaro::recon {

using diff::Graph;
using diff::ParamStore;
using diff::Var;

struct NetConfig {
  int n_unrolls = 5;
  int cg_iters = 5;
  int n_features = 16;  // per-contrast feature channels
  int width1 = 32;      // encoder/decoder full-resolution width
  int width2 = 64;      // bottleneck width
  double rho_init = 0.1;
  bool fusion = true;  // echo recurrence + cross-contrast exchange
  int n_contrasts = 11;
  int n_echoes = 8;
};

// Parameter-store indices for the fusion + denoiser weights.
struct NetParams {
  int nm_k, nm_b;  // echo feature conv, 2 -> n_features (shared over echoes)
  int nh_k, nh_b;  // hidden-state recurrence, n_features -> n_features
  int ns_k, ns_b;  // single-echo feature conv, 2 -> n_features (shared)
  int e1_k, e1_b, e2_k, e2_b;  // encoder at full resolution
  int m1_k, m1_b, m2_k, m2_b;  // bottleneck after 2x down-sampling
  int d1_k, d1_b, d2_k, d2_b;  // decoder after up-sampling + skip concat
  int fin_k, fin_b;            // residual output conv -> 2*n_contrasts
  std::vector<int> rho_log;    // per-unroll log(rho)
};

NetParams init_net_params(ParamStore& store, const NetConfig& cfg, Rng& rng);

// Per-slice model: RSS-normalized coil maps plus one mask node per contrast.
struct SliceModel {
  std::vector<Var> coils;  // complex [H,W] constants
  std::vector<Var> masks;  // real [H,W] in [0,1]
  int ny = 0, nz = 0;
};

// Normalize coil slices so the root-sum-of-squares is 1 on the grid.
std::vector<CGrid> normalize_coils(const std::vector<CGrid>& coils2d);

// y[j*nc + c] = U_j .* fft2c(S_c .* x_j)
std::vector<Var> forward_op(Graph& g, const SliceModel& m,
                            const std::vector<Var>& x);
// x_j = sum_c conj(S_c) .* ifft2c(U_j .* y_{j,c})
std::vector<Var> adjoint_op(Graph& g, const SliceModel& m,
                            const std::vector<Var>& y);

// (A^H A + lambda I) x = A^H y per contrast, via unrolled CG.
std::vector<Var> cg_sense(Graph& g, const SliceModel& m,
                          const std::vector<Var>& y, double lambda,
                          int n_iter, double tol = 0.0);

struct NetVars {
  std::vector<Var> vars;  // one per ParamStore entry, same indexing
};
NetVars bind_params(Graph& g, const ParamStore& store, bool trainable_only_grads);

// Multi-contrast feature fusion: echo recurrence, shared single-echo conv,
// then the additive cross-contrast exchange. With fusion off both the
// recurrence and the exchange are dropped.
std::vector<Var> fuse_features(Graph& g, const NetConfig& cfg,
                               const NetParams& p, const NetVars& nv,
                               const std::vector<Var>& images);

// Unrolled ADMM: CG data-consistency x-update, denoiser z-update with the
// fused features feeding a 2-scale encoder-decoder, dual ascent on u.
std::vector<Var> admm_unrolled(Graph& g, const SliceModel& m,
                               const std::vector<Var>& y, const NetConfig& cfg,
                               const NetParams& p, const NetVars& nv);

// Plain (no-graph) helpers used by the pipeline.
struct ContrastKSpace {
  std::vector<std::vector<CGrid>> y;  // [contrast][coil] volumes
  std::vector<MaskGrid> validity;     // per contrast
};

// Assemble per-contrast k-space from schedule-acquired data, honoring the
// shared-line multi-echo convention.
ContrastKSpace blocks_to_contrasts(const seqsim::KSpaceSet& acquired,
                                   const sampling::AcquisitionSchedule& sched);

}  // namespace mclaro::recon
