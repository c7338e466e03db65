#include "mclaro/config.hpp"

#include <algorithm>

#include "mclaro/training.hpp"

namespace mclaro::pipeline {
namespace {

using io::json;

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("config: " + msg);
}

void reject_unknown(const json& j, const std::vector<std::string>& known,
                    const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end())
      fail("unknown key '" + k + "' in " + where);
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

std::vector<double> expand_grid(const std::vector<double>& spec) {
  if (spec.size() != 3) fail("grid spec must be [start, step, stop]");
  const double start = spec[0], step = spec[1], stop = spec[2];
  if (!(step > 0) || !(stop >= start)) fail("bad grid spec");
  std::vector<double> g;
  for (double v = start; v <= stop + 1e-9; v += step) g.push_back(v);
  return g;
}

}  // namespace

std::vector<double> Config::t1_grid() const { return expand_grid(t1_grid_spec); }
std::vector<double> Config::t2_grid() const { return expand_grid(t2_grid_spec); }

io::json Config::section(const std::string& name) const {
  return raw.contains(name) ? raw.at(name) : io::json::object();
}

Config parse_config(const json& j) {
  Config c;
  reject_unknown(j, {"seed", "threads", "phantom", "coils", "field",
                     "sequence", "sampling", "network", "training", "mapping"},
                 "top level");
  if (!j.contains("seed")) fail("seed is mandatory");
  c.seed = j.at("seed").get<std::uint64_t>();
  c.threads = get_or(j, "threads", 1);
  if (c.threads < 1) fail("threads must be >= 1");

  if (j.contains("phantom")) {
    const json& p = j.at("phantom");
    reject_unknown(p, {"dims", "voxel_mm", "b0_dir", "n_train", "n_val",
                       "n_test", "slices_per_phantom"}, "phantom");
    c.dims = get_or(p, "dims", c.dims);
    if (c.dims.size() != 3) fail("phantom.dims must have 3 entries");
    auto vm = get_or(p, "voxel_mm", std::vector<double>{2.0, 2.0, 2.0});
    auto bd = get_or(p, "b0_dir", std::vector<double>{0.0, 0.0, 1.0});
    if (vm.size() != 3 || bd.size() != 3) fail("voxel_mm/b0_dir need 3 entries");
    std::copy(vm.begin(), vm.end(), c.voxel_mm.begin());
    std::copy(bd.begin(), bd.end(), c.b0_dir.begin());
    c.n_train_phantoms = get_or(p, "n_train", c.n_train_phantoms);
    c.n_val_phantoms = get_or(p, "n_val", c.n_val_phantoms);
    c.n_test_phantoms = get_or(p, "n_test", c.n_test_phantoms);
    c.slices_per_phantom = get_or(p, "slices_per_phantom", c.slices_per_phantom);
    if (c.n_train_phantoms < 1 || c.n_val_phantoms < 1 || c.n_test_phantoms < 1)
      fail("phantom counts must be >= 1");
    if (c.slices_per_phantom < 1 || c.slices_per_phantom > c.dims[0])
      fail("slices_per_phantom out of range");
  }
  if (j.contains("coils")) {
    const json& p = j.at("coils");
    reject_unknown(p, {"n_coils", "flat"}, "coils");
    c.n_coils = get_or(p, "n_coils", c.n_coils);
    c.flat_coils = get_or(p, "flat", c.flat_coils);
    if (c.n_coils < 1) fail("coils.n_coils must be >= 1");
  }
  if (j.contains("field")) {
    const json& p = j.at("field");
    reject_unknown(p, {"hz_per_ppm"}, "field");
    c.hz_per_ppm = get_or(p, "hz_per_ppm", c.hz_per_ppm);
    if (!(c.hz_per_ppm > 0)) fail("field.hz_per_ppm must be > 0");
  }
  if (j.contains("sequence")) {
    const json& p = j.at("sequence");
    reject_unknown(p, {"flip_deg", "tr_gre_ms", "tr_mgre_ms", "te_gre_ms",
                       "te_mgre_ms", "t2prep_te_ms", "trs_per_segment",
                       "inversion_efficiency", "td_ms"}, "sequence");
    c.seq.flip_deg = get_or(p, "flip_deg", c.seq.flip_deg);
    c.seq.tr_gre_ms = get_or(p, "tr_gre_ms", c.seq.tr_gre_ms);
    c.seq.tr_mgre_ms = get_or(p, "tr_mgre_ms", c.seq.tr_mgre_ms);
    c.seq.te_gre_ms = get_or(p, "te_gre_ms", c.seq.te_gre_ms);
    c.seq.te_mgre_ms = get_or(p, "te_mgre_ms", c.seq.te_mgre_ms);
    c.seq.t2prep_te_ms = get_or(p, "t2prep_te_ms", c.seq.t2prep_te_ms);
    c.seq.trs_per_segment = get_or(p, "trs_per_segment", c.seq.trs_per_segment);
    c.seq.inversion_efficiency =
        get_or(p, "inversion_efficiency", c.seq.inversion_efficiency);
    auto td = get_or(p, "td_ms", std::vector<double>{0, 0, 0, 0});
    if (td.size() != 4) fail("sequence.td_ms needs 4 entries");
    std::copy(td.begin(), td.end(), c.seq.td_ms.begin());
  }
  try {
    c.seq.validate();
  } catch (const std::exception& e) {
    fail(e.what());
  }
  if (j.contains("sampling")) {
    const json& p = j.at("sampling");
    reject_unknown(p, {"r", "slope_a", "calib_block", "vd_levels",
                       "noise_sigma"}, "sampling");
    c.r = get_or(p, "r", c.r);
    c.slope_a = get_or(p, "slope_a", c.slope_a);
    c.calib_block = get_or(p, "calib_block", c.calib_block);
    c.vd_levels = get_or(p, "vd_levels", c.vd_levels);
    c.noise_sigma = get_or(p, "noise_sigma", c.noise_sigma);
    if (c.r < 1) fail("sampling.r must be >= 1");
    if (!(c.slope_a > 0)) fail("sampling.slope_a must be > 0");
    if (c.calib_block < 0) fail("sampling.calib_block must be >= 0");
    if (c.noise_sigma < 0) fail("sampling.noise_sigma must be >= 0");
  }
  if (j.contains("network")) {
    const json& p = j.at("network");
    reject_unknown(p, {"n_unrolls", "cg_iters", "n_features", "width1",
                       "width2", "rho_init"}, "network");
    c.net.n_unrolls = get_or(p, "n_unrolls", c.net.n_unrolls);
    c.net.cg_iters = get_or(p, "cg_iters", c.net.cg_iters);
    c.net.n_features = get_or(p, "n_features", c.net.n_features);
    c.net.width1 = get_or(p, "width1", c.net.width1);
    c.net.width2 = get_or(p, "width2", c.net.width2);
    c.net.rho_init = get_or(p, "rho_init", c.net.rho_init);
    if (c.net.n_unrolls < 0 || c.net.cg_iters < 1 || c.net.n_features < 1 ||
        c.net.width1 < 1 || c.net.width2 < 1 || !(c.net.rho_init > 0))
      fail("bad network section");
  }
  if (j.contains("training")) {
    const json& p = j.at("training");
    reject_unknown(p, {"lr", "epochs_phase1", "epochs_phase2", "variants",
                       "phase2_ratio_tol"}, "training");
    c.lr = get_or(p, "lr", c.lr);
    c.epochs_phase1 = get_or(p, "epochs_phase1", c.epochs_phase1);
    c.epochs_phase2 = get_or(p, "epochs_phase2", c.epochs_phase2);
    c.variants = get_or(p, "variants", c.variants);
    c.phase2_ratio_tol = get_or(p, "phase2_ratio_tol", c.phase2_ratio_tol);
    if (!(c.lr > 0) || c.epochs_phase1 < 1 || c.epochs_phase2 < 0)
      fail("bad training section");
    if (c.variants.empty()) fail("training.variants must not be empty");
    for (const auto& v : c.variants) {
      bool f, m;
      if (!training::parse_ablation_flags(v, f, m))
        fail("bad ablation flags '" + v + "'");
    }
  }
  if (j.contains("mapping")) {
    const json& p = j.at("mapping");
    reject_unknown(p, {"t1_grid", "t2_grid", "tkd_threshold", "pdf_cg_iters"},
                   "mapping");
    c.t1_grid_spec = get_or(p, "t1_grid", c.t1_grid_spec);
    c.t2_grid_spec = get_or(p, "t2_grid", c.t2_grid_spec);
    c.tkd_threshold = get_or(p, "tkd_threshold", c.tkd_threshold);
    c.pdf_cg_iters = get_or(p, "pdf_cg_iters", c.pdf_cg_iters);
    if (!(c.tkd_threshold > 0 && c.tkd_threshold <= 1.0 / 3.0))
      fail("mapping.tkd_threshold must be in (0, 1/3]");
    if (c.pdf_cg_iters < 1) fail("mapping.pdf_cg_iters must be >= 1");
  }

  // grids must expand
  (void)c.t1_grid();
  (void)c.t2_grid();

  // even in-plane dims for the 2-scale denoiser
  if (c.dims[1] % 4 != 0 || c.dims[2] % 4 != 0)
    fail("phantom in-plane dims must be multiples of 4");

  c.raw = j;
  return c;
}

Config load_config(const std::string& path) {
  return parse_config(io::read_json(path));
}

}  // namespace mclaro::pipeline
