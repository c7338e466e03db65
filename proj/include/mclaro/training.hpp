#pragma once

#include <optional>

#include "mclaro/recon.hpp"

namespace mclaro::training {

// One 2-d slice sample: reference contrast images, normalized coil maps,
// and the fully sampled k-space they generate.
struct Sample {
  std::vector<CGrid> target;           // per contrast (ny, nz)
  std::vector<CGrid> coils;            // per coil (ny, nz), RSS = 1
  std::vector<std::vector<CGrid>> y;   // [contrast][coil] full k-space
};

struct Dataset {
  std::vector<Sample> train, val;
  int ny = 0, nz = 0;
  int n_contrasts = 0, n_echoes = 0;
};

struct TrainConfig {
  int r = 8;                  // acceleration: target mean(P) = 1/r over support
  double slope_a = 0.25;
  double lr = 1e-3;
  int epochs_phase1 = 30;
  int epochs_phase2 = 10;
  std::uint64_t seed = 0;
  bool mask_opt = true;
  bool fusion = true;
  int calib_block = 8;
  int vd_levels = 6;
  double phase2_ratio_tol = 0.01;  // redraw guard on the frozen masks
  recon::NetConfig net;
};

struct LossRow {
  int epoch = 0;
  int step = 0;  // global step; -1 for epoch summary rows
  double loss = 0;
  double val_loss = 0;
};

struct Checkpoint {
  diff::ParamStore params;            // network weights + sampling weights w
  std::vector<MaskGrid> fixed_masks;  // phase-2 frozen draws (empty in phase 1)
  std::vector<RGrid> prob_maps;       // final renormalized P_j
  int phase = 1;
  std::vector<LossRow> history;

  void save(const std::string& dir, const std::map<std::string, std::string>&
                                         sidecar = {}) const;
  static Checkpoint load(const std::string& dir);
};

// Differentiable probability map: clipped sigmoid of a*w renormalized to
// mean 1/r over the support. `renormalize=false` gives the raw sigmoid used
// by the gradient-contract checks.
recon::Var prob_graph(diff::Graph& g, recon::Var w, const MaskGrid& support,
                      double a, double target_ratio, bool renormalize = true);

// Per-sample loss graph shared by both phases; returns the loss node.
struct StepGraph {
  recon::Var loss;
  std::vector<recon::Var> recon_images;
};

StepGraph build_step(diff::Graph& g, const Sample& s, const MaskGrid& support,
                     const TrainConfig& cfg, const recon::NetParams& net_params,
                     const recon::NetVars& nv,
                     const std::vector<recon::Var>& mask_vars);

Checkpoint train_phase1(const Dataset& data, const MaskGrid& support,
                        const TrainConfig& cfg);

Checkpoint train_phase2(const Dataset& data, const MaskGrid& support,
                        const TrainConfig& cfg, const Checkpoint& phase1);

// Frozen masks for phase 2: seeded Bernoulli draws redrawn until the
// realized per-contrast ratio sits within tol of 1/r (a deployed scan
// realizes a single draw, so a bad draw is rejected up front).
std::vector<MaskGrid> draw_phase2_masks(const std::vector<RGrid>& probs,
                                        const MaskGrid& support,
                                        const TrainConfig& cfg);

// Reconstruct one slice with trained weights and fixed masks (inference).
std::vector<CGrid> reconstruct_slice(const Sample& s,
                                     const std::vector<MaskGrid>& masks,
                                     const TrainConfig& cfg,
                                     const Checkpoint& ckpt);

struct AblationVariant {
  std::string flags;  // "00", "01", "10", "11": fusion bit, mask_opt bit
  Checkpoint checkpoint;
  double test_ssim = 0;
  double test_loss = 0;
};

bool parse_ablation_flags(const std::string& flags, bool& fusion,
                          bool& mask_opt);

std::vector<AblationVariant> run_ablation(const Dataset& data,
                                          const MaskGrid& support,
                                          const TrainConfig& base,
                                          const std::vector<std::string>& variants);

}  // namespace mclaro::training
