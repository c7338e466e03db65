#pragma once

#include <array>
#include <string>
#include <vector>

#include "mclaro/io.hpp"
#include "mclaro/recon.hpp"
#include "mclaro/seqsim.hpp"

namespace mclaro::pipeline {

// Normative experiment configuration; the JSON schema mirrors the fields
// below section by section (see README). Unknown keys are rejected.
struct Config {
  std::uint64_t seed = 0;  // mandatory
  int threads = 1;

  // phantom
  std::vector<int> dims{32, 64, 64};
  std::array<double, 3> voxel_mm{2.0, 2.0, 2.0};
  std::array<double, 3> b0_dir{0.0, 0.0, 1.0};
  int n_train_phantoms = 8;
  int n_val_phantoms = 1;
  int n_test_phantoms = 2;
  int slices_per_phantom = 8;

  // coils / field
  int n_coils = 8;
  bool flat_coils = false;
  double hz_per_ppm = 127.74;

  seqsim::SequenceParams seq;

  // sampling
  int r = 8;
  double slope_a = 0.25;
  int calib_block = 8;
  int vd_levels = 6;
  double noise_sigma = 0.0;

  recon::NetConfig net;

  // training
  double lr = 1e-3;
  int epochs_phase1 = 30;
  int epochs_phase2 = 10;
  std::vector<std::string> variants{"00", "11"};
  double phase2_ratio_tol = 0.01;

  // mapping
  std::vector<double> t1_grid_spec{100, 10, 2000};  // start, step, stop
  std::vector<double> t2_grid_spec{10, 1, 200};
  double tkd_threshold = 0.2;
  int pdf_cg_iters = 30;

  io::json raw;  // normalized dump used for stage hashing

  std::vector<double> t1_grid() const;
  std::vector<double> t2_grid() const;
  io::json section(const std::string& name) const;
};

Config parse_config(const io::json& j);
Config load_config(const std::string& path);

}  // namespace mclaro::pipeline
