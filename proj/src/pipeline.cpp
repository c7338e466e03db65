#include "mclaro/pipeline.hpp"

#include <cmath>
#include <fstream>

#include "mclaro/fft.hpp"
#include "mclaro/metrics.hpp"

namespace mclaro::pipeline {

namespace fs = std::filesystem;
using io::json;

namespace {

const char* kSets[] = {"train", "val", "test"};

std::string arm_name(const std::string& flags) { return "v" + flags; }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// packs a contrast set slice into [2*nj, ny, nz] for SSIM evaluation,
// matching the trainer's channel order
RGrid pack_slice(const std::vector<CGrid>& images2d) {
  const int nj = (int)images2d.size();
  const int ny = images2d[0].dim(0), nz = images2d[0].dim(1);
  RGrid out({2 * nj, ny, nz});
  for (int j = 0; j < nj; ++j)
    for (int y = 0; y < ny; ++y)
      for (int z = 0; z < nz; ++z) {
        out.at3(2 * j, y, z) = images2d[j].at2(y, z).real();
        out.at3(2 * j + 1, y, z) = images2d[j].at2(y, z).imag();
      }
  return out;
}

std::vector<CGrid> volume_slice(const CGrid& vol4d, int x) {
  const int nj = vol4d.dim(0), nx = vol4d.dim(1), ny = vol4d.dim(2),
            nz = vol4d.dim(3);
  (void)nx;
  std::vector<CGrid> out;
  out.reserve(nj);
  for (int j = 0; j < nj; ++j) {
    CGrid s({ny, nz});
    for (int y = 0; y < ny; ++y)
      for (int z = 0; z < nz; ++z)
        s.at2(y, z) =
            vol4d[(((std::int64_t)j * nx + x) * ny + y) * nz + z];
    out.push_back(std::move(s));
  }
  return out;
}

seqsim::ContrastImageSet volume_to_set(const CGrid& vol4d, int n_echoes) {
  seqsim::ContrastImageSet set;
  set.n_echoes = n_echoes;
  const int nj = vol4d.dim(0);
  const std::vector<int> dims = {vol4d.dim(1), vol4d.dim(2), vol4d.dim(3)};
  const std::int64_t n = (std::int64_t)dims[0] * dims[1] * dims[2];
  for (int j = 0; j < nj; ++j) {
    CGrid v(dims);
    for (std::int64_t i = 0; i < n; ++i) v[i] = vol4d[(std::int64_t)j * n + i];
    set.images.push_back(std::move(v));
  }
  return set;
}

}  // namespace

Experiment::Experiment(Config cfg, fs::path out_dir)
    : cfg_(std::move(cfg)), out_(std::move(out_dir)) {}

std::string Experiment::stage_hash(const std::string& stage) const {
  json j;
  j["seed"] = cfg_.seed;
  if (stage == "phantom") {
    j["phantom"] = cfg_.section("phantom");
    j["coils"] = cfg_.section("coils");
    j["field"] = cfg_.section("field");
  } else if (stage == "simulate") {
    j["upstream"] = stage_hash("phantom");
    j["sequence"] = cfg_.section("sequence");
    j["mapping"] = cfg_.section("mapping");
  } else if (stage == "train") {
    j["upstream"] = stage_hash("simulate");
    j["sampling"] = cfg_.section("sampling");
    j["network"] = cfg_.section("network");
    j["training"] = cfg_.section("training");
  } else if (stage == "reconstruct") {
    j["upstream"] = stage_hash("train");
  } else if (stage == "map") {
    j["upstream"] = stage_hash("reconstruct");
    j["mapping"] = cfg_.section("mapping");
  } else if (stage == "evaluate") {
    j["upstream"] = stage_hash("map");
  } else {
    throw std::invalid_argument("unknown stage: " + stage);
  }
  return io::config_hash(j);
}

bool Experiment::stage_done(const std::string& stage) const {
  const fs::path marker = out_ / stage / "stage.json";
  if (!fs::exists(marker)) return false;
  try {
    const json j = io::read_json(marker);
    return j.at("config_hash").get<std::string>() == stage_hash(stage);
  } catch (...) {
    return false;
  }
}

void Experiment::mark_done(const std::string& stage) {
  json j;
  j["stage"] = stage;
  j["config_hash"] = stage_hash(stage);
  io::write_json(out_ / stage / "stage.json", j);
}

void Experiment::require_done(const std::string& stage) const {
  if (!stage_done(stage))
    throw MissingArtifact("stage '" + stage +
                          "' has no up-to-date artifacts; run it first");
}

void Experiment::run(const std::string& stage) {
  if (stage == "all") {
    for (const char* s : {"phantom", "simulate", "train", "reconstruct",
                          "map", "evaluate"})
      run(s);
    return;
  }
  if (stage_done(stage)) return;  // artifacts reused untouched
  if (stage == "phantom") stage_phantom();
  else if (stage == "simulate") stage_simulate();
  else if (stage == "train") stage_train();
  else if (stage == "reconstruct") stage_reconstruct();
  else if (stage == "map") stage_map();
  else if (stage == "evaluate") stage_evaluate();
  else throw std::invalid_argument("unknown stage: " + stage);
  mark_done(stage);
}

// ---- phantom ----

void Experiment::stage_phantom() {
  const std::string hash = stage_hash("phantom");
  const int counts[3] = {cfg_.n_train_phantoms, cfg_.n_val_phantoms,
                         cfg_.n_test_phantoms};
  for (int si = 0; si < 3; ++si) {
    for (int i = 0; i < counts[si]; ++i) {
      phantom::PhantomSpec spec = phantom::PhantomSpec::brain_default(
          cfg_.dims, mix_seed(cfg_.seed, 0x100 * (si + 1) + i));
      spec.voxel_mm = cfg_.voxel_mm;
      spec.b0_dir = cfg_.b0_dir;
      const auto ph = phantom::make_phantom(spec);
      const auto coils = phantom::synthesize_coils(
          cfg_.dims, cfg_.n_coils, mix_seed(cfg_.seed, 0x900 + 0x10 * si + i),
          cfg_.flat_coils);
      const RGrid chi = ph.class_map(&phantom::TissueClass::chi_ppm);
      const RGrid field = phantom::susceptibility_to_field(
          chi, cfg_.voxel_mm, cfg_.b0_dir, cfg_.hz_per_ppm);

      const fs::path dir =
          out_ / "phantom" / (std::string(kSets[si]) + "_" + std::to_string(i));
      json classes = json::array();
      for (const auto& [label, c] : ph.classes) {
        classes.push_back({{"label", label},
                           {"name", c.name},
                           {"t1_ms", c.t1_ms},
                           {"t2_ms", c.t2_ms},
                           {"t2s_ms", c.t2s_ms},
                           {"m0", c.m0},
                           {"chi_ppm", c.chi_ppm}});
      }
      json side = {{"stage", "phantom"},
                   {"config_hash", hash},
                   {"seed", spec.seed},
                   {"voxel_mm", cfg_.voxel_mm},
                   {"b0_dir", cfg_.b0_dir},
                   {"classes", classes}};
      io::save_i32(dir / "labels.i32", ph.labels, side);
      io::save_u8(dir / "brain.u8", ph.brain_mask,
                  {{"stage", "phantom"}, {"config_hash", hash}});
      io::save_f32(dir / "chi.f32", chi,
                   {{"stage", "phantom"}, {"config_hash", hash}, {"units", "ppm"}});
      io::save_f32(dir / "field.f32", field,
                   {{"stage", "phantom"}, {"config_hash", hash}, {"units", "Hz"}});
      CGrid coilvol({coils.n_coils, cfg_.dims[0], cfg_.dims[1], cfg_.dims[2]});
      const std::int64_t n = (std::int64_t)cfg_.dims[0] * cfg_.dims[1] * cfg_.dims[2];
      for (int c = 0; c < coils.n_coils; ++c)
        for (std::int64_t v = 0; v < n; ++v)
          coilvol[(std::int64_t)c * n + v] = coils.sens[c][v];
      io::save_c64(dir / "coils.c64", coilvol,
                   {{"stage", "phantom"}, {"config_hash", hash}});
    }
  }
}

Experiment::PhantomSet Experiment::load_phantom(const std::string& set,
                                                int index) const {
  const fs::path dir = out_ / "phantom" / (set + "_" + std::to_string(index));
  if (!fs::exists(dir / "labels.i32"))
    throw MissingArtifact("missing phantom artifact: " + dir.string());
  PhantomSet ps;
  ps.ph.labels = io::load_i32(dir / "labels.i32");
  ps.ph.brain_mask = io::load_u8(dir / "brain.u8");
  ps.field_hz = io::load_f32(dir / "field.f32");
  const json side = io::load_sidecar(dir / "labels.i32");
  ps.ph.voxel_mm = cfg_.voxel_mm;
  ps.ph.b0_dir = cfg_.b0_dir;
  ps.ph.seed = side.at("seed").get<std::uint64_t>();
  for (const auto& c : side.at("classes")) {
    phantom::TissueClass tc;
    tc.name = c.at("name").get<std::string>();
    tc.t1_ms = c.at("t1_ms").get<double>();
    tc.t2_ms = c.at("t2_ms").get<double>();
    tc.t2s_ms = c.at("t2s_ms").get<double>();
    tc.m0 = c.at("m0").get<double>();
    tc.chi_ppm = c.at("chi_ppm").get<double>();
    ps.ph.classes[c.at("label").get<int>()] = tc;
  }
  const CGrid coilvol = io::load_c64(dir / "coils.c64");
  ps.coils.n_coils = coilvol.dim(0);
  const std::int64_t n =
      (std::int64_t)coilvol.dim(1) * coilvol.dim(2) * coilvol.dim(3);
  for (int c = 0; c < ps.coils.n_coils; ++c) {
    CGrid s({coilvol.dim(1), coilvol.dim(2), coilvol.dim(3)});
    for (std::int64_t v = 0; v < n; ++v) s[v] = coilvol[(std::int64_t)c * n + v];
    ps.coils.sens.push_back(std::move(s));
  }
  return ps;
}

// ---- simulate ----

void Experiment::stage_simulate() {
  require_done("phantom");
  const std::string hash = stage_hash("simulate");
  const int counts[3] = {cfg_.n_train_phantoms, cfg_.n_val_phantoms,
                         cfg_.n_test_phantoms};
  for (int si = 0; si < 3; ++si) {
    for (int i = 0; i < counts[si]; ++i) {
      const PhantomSet ps = load_phantom(kSets[si], i);
      const auto images = seqsim::simulate_contrasts(ps.ph, cfg_.seq, ps.field_hz);
      const int nj = images.n_contrasts();
      CGrid vol({nj, cfg_.dims[0], cfg_.dims[1], cfg_.dims[2]});
      const std::int64_t n =
          (std::int64_t)cfg_.dims[0] * cfg_.dims[1] * cfg_.dims[2];
      for (int j = 0; j < nj; ++j)
        for (std::int64_t v = 0; v < n; ++v)
          vol[(std::int64_t)j * n + v] = images.images[j][v];
      io::save_c64(out_ / "simulate" /
                       (std::string(kSets[si]) + "_" + std::to_string(i) +
                        "_images.c64"),
                   vol,
                   {{"stage", "simulate"},
                    {"config_hash", hash},
                    {"n_echoes", images.n_echoes},
                    {"contrast_order",
                     "echo_0..N-1, ir_1, ir_2, t2prep"}});
    }
  }
  // matching dictionary
  const auto dict = seqsim::build_dictionary(cfg_.seq, cfg_.t1_grid(),
                                             cfg_.t2_grid());
  RGrid t1v({(int)dict.t1_ms.size()});
  RGrid t2v({(int)dict.t2_ms.size()});
  for (size_t i = 0; i < dict.t1_ms.size(); ++i) {
    t1v[i] = dict.t1_ms[i];
    t2v[i] = dict.t2_ms[i];
  }
  json side = {{"stage", "simulate"},
               {"config_hash", hash},
               {"normalization", "unit-l2"},
               {"t1_grid", cfg_.t1_grid_spec},
               {"t2_grid", cfg_.t2_grid_spec},
               {"sequence", cfg_.section("sequence")}};
  io::save_f32(out_ / "simulate" / "dictionary" / "atoms.f32", dict.atoms, side);
  io::save_f32(out_ / "simulate" / "dictionary" / "t1_ms.f32", t1v,
               {{"stage", "simulate"}, {"config_hash", hash}});
  io::save_f32(out_ / "simulate" / "dictionary" / "t2_ms.f32", t2v,
               {{"stage", "simulate"}, {"config_hash", hash}});
}

seqsim::ContrastImageSet Experiment::load_images(const std::string& set,
                                                 int index) const {
  const fs::path p = out_ / "simulate" /
                     (set + "_" + std::to_string(index) + "_images.c64");
  if (!fs::exists(p)) throw MissingArtifact("missing images: " + p.string());
  const json side = io::load_sidecar(p);
  return volume_to_set(io::load_c64(p), side.at("n_echoes").get<int>());
}

// ---- train ----

training::Sample Experiment::make_sample(const seqsim::ContrastImageSet& images,
                                         const phantom::CoilSet& coils,
                                         int slice_x,
                                         std::uint64_t noise_stream) const {
  training::Sample s;
  const int nj = images.n_contrasts();
  const int ny = cfg_.dims[1], nz = cfg_.dims[2];
  std::vector<CGrid> coils2d;
  for (int c = 0; c < coils.n_coils; ++c) {
    CGrid m({ny, nz});
    for (int y = 0; y < ny; ++y)
      for (int z = 0; z < nz; ++z) m.at2(y, z) = coils.sens[c].at3(slice_x, y, z);
    coils2d.push_back(std::move(m));
  }
  s.coils = recon::normalize_coils(coils2d);
  for (int j = 0; j < nj; ++j) {
    CGrid t({ny, nz});
    for (int y = 0; y < ny; ++y)
      for (int z = 0; z < nz; ++z)
        t.at2(y, z) = images.images[j].at3(slice_x, y, z);
    s.target.push_back(std::move(t));
  }
  s.y.resize(nj);
  for (int j = 0; j < nj; ++j) {
    for (int c = 0; c < coils.n_coils; ++c) {
      CGrid y({ny, nz});
      for (int yy = 0; yy < ny; ++yy)
        for (int z = 0; z < nz; ++z)
          y.at2(yy, z) = s.coils[c].at2(yy, z) * s.target[j].at2(yy, z);
      fft::fft2c_inplace(y);
      if (cfg_.noise_sigma > 0) {
        Rng rng = Rng::derive(noise_stream, 0x40 * j + c);
        for (std::int64_t v = 0; v < y.numel(); ++v)
          y[v] += Cplx(cfg_.noise_sigma * rng.normal(),
                       cfg_.noise_sigma * rng.normal());
      }
      s.y[j].push_back(std::move(y));
    }
  }
  return s;
}

training::Dataset Experiment::load_dataset() const {
  training::Dataset data;
  data.ny = cfg_.dims[1];
  data.nz = cfg_.dims[2];
  const int x0 = cfg_.dims[0] / 2 - cfg_.slices_per_phantom / 2;
  auto add = [&](const char* set, int count, std::vector<training::Sample>& out) {
    for (int i = 0; i < count; ++i) {
      const PhantomSet ps = load_phantom(set, i);
      const auto images = load_images(set, i);
      data.n_contrasts = images.n_contrasts();
      data.n_echoes = images.n_echoes;
      for (int sx = 0; sx < cfg_.slices_per_phantom; ++sx)
        out.push_back(make_sample(images, ps.coils, x0 + sx,
                                  mix_seed(cfg_.seed, 0x4000 + i * 97 + sx)));
    }
  };
  add("train", cfg_.n_train_phantoms, data.train);
  add("val", cfg_.n_val_phantoms, data.val);
  return data;
}

training::TrainConfig Experiment::train_config() const {
  training::TrainConfig tc;
  tc.r = cfg_.r;
  tc.slope_a = cfg_.slope_a;
  tc.lr = cfg_.lr;
  tc.epochs_phase1 = cfg_.epochs_phase1;
  tc.epochs_phase2 = cfg_.epochs_phase2;
  tc.seed = cfg_.seed;
  tc.calib_block = cfg_.calib_block;
  tc.vd_levels = cfg_.vd_levels;
  tc.phase2_ratio_tol = cfg_.phase2_ratio_tol;
  tc.net = cfg_.net;
  return tc;
}

void Experiment::stage_train() {
  require_done("simulate");
  const training::Dataset data = load_dataset();
  const MaskGrid support =
      sampling::elliptical_support(cfg_.dims[1], cfg_.dims[2]);
  for (const std::string& flags : cfg_.variants) {
    training::TrainConfig tc = train_config();
    if (!training::parse_ablation_flags(flags, tc.fusion, tc.mask_opt))
      throw std::invalid_argument("bad ablation flags " + flags);
    const std::map<std::string, std::string> sidecar = {
        {"stage", "train"}, {"config_hash", stage_hash("train")}};
    const auto p1 = training::train_phase1(data, support, tc);
    p1.save((out_ / "train" / arm_name(flags) / "phase1").string(), sidecar);
    const auto p2 = training::train_phase2(data, support, tc, p1);
    p2.save((out_ / "train" / arm_name(flags) / "phase2").string(), sidecar);
  }
}

// ---- reconstruct ----

namespace {

std::vector<CGrid> cg_sense_slice(const training::Sample& s,
                                  const std::vector<MaskGrid>& masks,
                                  double lambda, int iters) {
  diff::Graph g;
  recon::SliceModel model;
  model.ny = s.target[0].dim(0);
  model.nz = s.target[0].dim(1);
  for (const auto& c : s.coils)
    model.coils.push_back(g.constant(diff::Tensor::from(c)));
  for (const auto& m : masks) {
    RGrid r(m.shape());
    for (std::int64_t i = 0; i < m.numel(); ++i) r[i] = m[i] ? 1.0 : 0.0;
    model.masks.push_back(g.constant(diff::Tensor::from(r)));
  }
  std::vector<recon::Var> y;
  for (size_t j = 0; j < s.y.size(); ++j)
    for (size_t c = 0; c < s.y[j].size(); ++c)
      y.push_back(g.constant(diff::Tensor::from(s.y[j][c])));
  const auto x = recon::cg_sense(g, model, y, lambda, iters, 1e-10);
  std::vector<CGrid> out;
  for (auto v : x) out.push_back(g.val(v).to_cgrid());
  return out;
}

}  // namespace

void Experiment::stage_reconstruct() {
  require_done("train");
  const std::string hash = stage_hash("reconstruct");
  const int ny = cfg_.dims[1], nz = cfg_.dims[2], nx = cfg_.dims[0];
  const MaskGrid support = sampling::elliptical_support(ny, nz);
  std::int64_t n_support = 0;
  for (std::int64_t i = 0; i < support.numel(); ++i)
    if (support[i]) n_support++;

  // fully sampled arm: every fan-beam-assigned location
  const int full_reps = (int)(n_support / cfg_.seq.trs_per_segment);
  if (full_reps < 1)
    throw std::runtime_error("reconstruct: trs_per_segment exceeds support");
  const auto full_masks = sampling::full_scan_masks(
      support, full_reps, cfg_.seq.trs_per_segment, cfg_.seq.n_contrasts());
  const auto full_sched = sampling::schedule_undersampled(
      full_masks, full_reps, cfg_.seq, support);
  auto save_schedule = [&](const sampling::AcquisitionSchedule& sched,
                           const std::string& name) {
    json entries = json::array();
    for (const auto& e : sched.entries)
      entries.push_back({{"repetition", e.repetition},
                         {"block", e.block},
                         {"tr", e.tr},
                         {"ky", e.ky},
                         {"kz", e.kz},
                         {"contrast", e.contrast}});
    json j = {{"stage", "reconstruct"},
              {"config_hash", hash},
              {"n_repetitions", sched.n_repetitions},
              {"trs_per_segment", sched.trs_per_segment},
              {"records", entries}};
    io::write_json(out_ / "reconstruct" / (name + "_schedule.json"), j);
    for (size_t j2 = 0; j2 < sched.implied_masks.size(); ++j2)
      io::save_u8(out_ / "reconstruct" /
                      (name + "_mask_" + std::to_string(j2) + ".u8"),
                  sched.implied_masks[j2],
                  {{"stage", "reconstruct"}, {"config_hash", hash}});
  };
  save_schedule(full_sched, "full");

  auto recon_volume = [&](const std::string& set, int idx,
                          const std::function<std::vector<CGrid>(
                              const training::Sample&)>& slice_fn,
                          const std::string& name) {
    const PhantomSet ps = load_phantom(set, idx);
    const auto images = load_images(set, idx);
    const int nj = images.n_contrasts();
    CGrid vol({nj, nx, ny, nz});
    const std::int64_t plane = (std::int64_t)ny * nz;
    for (int x = 0; x < nx; ++x) {
      const auto sample = make_sample(images, ps.coils, x,
                                      mix_seed(cfg_.seed, 0x7000 + idx * 131 + x));
      const auto rec = slice_fn(sample);
      for (int j = 0; j < nj; ++j)
        for (std::int64_t i = 0; i < plane; ++i)
          vol[((std::int64_t)j * nx + x) * plane + i] = rec[j][i];
    }
    io::save_c64(out_ / "reconstruct" /
                     (name + "_" + set + "_" + std::to_string(idx) + ".c64"),
                 vol,
                 {{"stage", "reconstruct"},
                  {"config_hash", hash},
                  {"n_echoes", images.n_echoes},
                  {"mask_provenance", name},
                  {"contrast_order", "echo_0..N-1, ir_1, ir_2, t2prep"}});
  };

  for (int i = 0; i < cfg_.n_test_phantoms; ++i)
    recon_volume("test", i,
                 [&](const training::Sample& s) {
                   return cg_sense_slice(s, full_masks, 1e-6, 20);
                 },
                 "full");

  for (const std::string& flags : cfg_.variants) {
    const auto ckpt = training::Checkpoint::load(
        (out_ / "train" / arm_name(flags) / "phase2").string());
    // repetitions sized by the largest block line set; the multi-echo block
    // acquires the union of the per-echo masks
    const int ne = cfg_.seq.n_echoes();
    MaskGrid mgre_union({ny, nz}, 0);
    for (int e = 0; e < ne; ++e)
      for (std::int64_t i = 0; i < mgre_union.numel(); ++i)
        if (ckpt.fixed_masks[e][i]) mgre_union[i] = 1;
    auto count_of = [](const MaskGrid& m) {
      std::int64_t c = 0;
      for (std::int64_t i = 0; i < m.numel(); ++i)
        if (m[i]) c++;
      return c;
    };
    std::int64_t max_count = count_of(mgre_union);
    for (int s = 0; s < 3; ++s)
      max_count = std::max(max_count, count_of(ckpt.fixed_masks[ne + s]));
    const int reps =
        (int)((max_count + cfg_.seq.trs_per_segment - 1) /
              cfg_.seq.trs_per_segment);
    const auto sched = sampling::schedule_undersampled(
        ckpt.fixed_masks, std::max(1, reps), cfg_.seq, support);
    save_schedule(sched, arm_name(flags));

    training::TrainConfig tc = train_config();
    if (!training::parse_ablation_flags(flags, tc.fusion, tc.mask_opt))
      throw std::invalid_argument("bad flags");
    for (int i = 0; i < cfg_.n_test_phantoms; ++i)
      recon_volume("test", i,
                   [&](const training::Sample& s) {
                     return training::reconstruct_slice(s, ckpt.fixed_masks,
                                                        tc, ckpt);
                   },
                   arm_name(flags));
  }
}

// ---- map ----

void Experiment::save_maps(const std::string& arm, int index,
                           const mapping::QuantMaps& maps,
                           const std::string& stage, const std::string& hash) {
  const fs::path dir = out_ / "map";
  const std::string base = arm + "_test_" + std::to_string(index);
  json side = {{"stage", stage},
               {"config_hash", hash},
               {"units", {{"t1", "ms"}, {"t2", "ms"}, {"t2s", "ms"}, {"chi", "ppm"}}},
               {"tkd_threshold", cfg_.tkd_threshold},
               {"t1_grid", cfg_.t1_grid_spec},
               {"t2_grid", cfg_.t2_grid_spec}};
  io::save_f32(dir / (base + "_t1.f32"), maps.t1_ms, side);
  io::save_f32(dir / (base + "_t2.f32"), maps.t2_ms, side);
  io::save_f32(dir / (base + "_t2s.f32"), maps.t2s_ms, side);
  io::save_f32(dir / (base + "_chi.f32"), maps.chi_ppm, side);
  io::save_u8(dir / (base + "_valid.u8"), maps.valid,
              {{"stage", stage}, {"config_hash", hash}});
}

mapping::QuantMaps Experiment::load_maps(const std::string& arm,
                                         int index) const {
  const fs::path dir = out_ / "map";
  const std::string base = arm + "_test_" + std::to_string(index);
  if (!fs::exists(dir / (base + "_t1.f32")))
    throw MissingArtifact("missing maps for " + base);
  mapping::QuantMaps maps;
  maps.t1_ms = io::load_f32(dir / (base + "_t1.f32"));
  maps.t2_ms = io::load_f32(dir / (base + "_t2.f32"));
  maps.t2s_ms = io::load_f32(dir / (base + "_t2s.f32"));
  maps.chi_ppm = io::load_f32(dir / (base + "_chi.f32"));
  maps.valid = io::load_u8(dir / (base + "_valid.u8"));
  return maps;
}

void Experiment::stage_map() {
  require_done("reconstruct");
  const std::string hash = stage_hash("map");
  const auto dict_atoms = io::load_f32(out_ / "simulate" / "dictionary" / "atoms.f32");
  const auto t1v = io::load_f32(out_ / "simulate" / "dictionary" / "t1_ms.f32");
  const auto t2v = io::load_f32(out_ / "simulate" / "dictionary" / "t2_ms.f32");
  seqsim::Dictionary dict;
  dict.atoms = dict_atoms;
  dict.t1_ms.assign(t1v.vec().begin(), t1v.vec().end());
  dict.t2_ms.assign(t2v.vec().begin(), t2v.vec().end());
  dict.t1_grid = cfg_.t1_grid();
  dict.t2_grid = cfg_.t2_grid();

  mapping::MappingConfig mc;
  mc.tkd_threshold = cfg_.tkd_threshold;
  mc.hz_per_ppm = cfg_.hz_per_ppm;
  mc.pdf_cg_iters = cfg_.pdf_cg_iters;
  mc.threads = cfg_.threads;

  std::vector<std::string> arms = {"full"};
  for (const auto& flags : cfg_.variants) arms.push_back(arm_name(flags));

  for (int i = 0; i < cfg_.n_test_phantoms; ++i) {
    const PhantomSet ps = load_phantom("test", i);
    // ground truth straight from the class table
    mapping::QuantMaps gt;
    gt.t1_ms = ps.ph.class_map(&phantom::TissueClass::t1_ms);
    gt.t2_ms = ps.ph.class_map(&phantom::TissueClass::t2_ms);
    gt.t2s_ms = ps.ph.class_map(&phantom::TissueClass::t2s_ms);
    gt.chi_ppm = ps.ph.class_map(&phantom::TissueClass::chi_ppm);
    gt.valid = ps.ph.brain_mask;
    save_maps("gt", i, gt, "map", hash);

    for (const std::string& arm : arms) {
      const fs::path p = out_ / "reconstruct" /
                         (arm + "_test_" + std::to_string(i) + ".c64");
      if (!fs::exists(p))
        throw MissingArtifact("missing reconstruction: " + p.string());
      const json side = io::load_sidecar(p);
      const auto set = volume_to_set(io::load_c64(p),
                                     side.at("n_echoes").get<int>());
      const auto maps = mapping::derive_all_maps(
          set, ps.ph.brain_mask, cfg_.voxel_mm, cfg_.b0_dir, cfg_.seq, dict, mc);
      save_maps(arm, i, maps, "map", hash);
    }
  }
}

// ---- evaluate ----

void Experiment::stage_evaluate() {
  require_done("map");
  const fs::path dir = out_ / "evaluate";
  fs::create_directories(dir);
  const int x0 = cfg_.dims[0] / 2 - cfg_.slices_per_phantom / 2;

  std::vector<std::string> arms = {"full"};
  for (const auto& flags : cfg_.variants) arms.push_back(arm_name(flags));

  // SSIM of each variant's reconstruction against the simulated reference
  // images, over the designated test slices.
  std::map<std::string, double> arm_ssim;
  for (const std::string& arm : arms) {
    double acc = 0;
    int n = 0;
    for (int i = 0; i < cfg_.n_test_phantoms; ++i) {
      const auto ref = load_images("test", i);
      const CGrid rec = io::load_c64(out_ / "reconstruct" /
                                     (arm + "_test_" + std::to_string(i) + ".c64"));
      for (int sx = 0; sx < cfg_.slices_per_phantom; ++sx) {
        const int x = x0 + sx;
        std::vector<CGrid> ref_slice;
        for (const auto& img : ref.images) {
          CGrid s({cfg_.dims[1], cfg_.dims[2]});
          for (int y = 0; y < cfg_.dims[1]; ++y)
            for (int z = 0; z < cfg_.dims[2]; ++z) s.at2(y, z) = img.at3(x, y, z);
          ref_slice.push_back(std::move(s));
        }
        acc += metrics::ssim_eval(pack_slice(volume_slice(rec, x)),
                                  pack_slice(ref_slice));
        n++;
      }
    }
    arm_ssim[arm] = acc / n;
  }

  // T1-map blurriness over the same slices
  std::string blur_csv = "arm,phantom,slice,score\n";
  std::map<std::string, double> arm_blur;
  for (const std::string& arm : arms) {
    double acc = 0;
    int n = 0;
    for (int i = 0; i < cfg_.n_test_phantoms; ++i) {
      const auto maps = load_maps(arm, i);
      for (int sx = 0; sx < cfg_.slices_per_phantom; ++sx) {
        const int x = x0 + sx;
        RGrid slice({cfg_.dims[1], cfg_.dims[2]});
        for (int y = 0; y < cfg_.dims[1]; ++y)
          for (int z = 0; z < cfg_.dims[2]; ++z)
            slice.at2(y, z) = maps.t1_ms.at3(x, y, z);
        const double score = metrics::blurriness(slice);
        blur_csv += arm + "," + std::to_string(i) + "," + std::to_string(x) +
                    "," + fmt(score) + "\n";
        acc += score;
        n++;
      }
    }
    arm_blur[arm] = acc / n;
  }
  {
    std::ofstream f(dir / "blurriness.csv", std::ios::trunc);
    f << blur_csv;
  }

  // ablation table
  {
    std::string csv = "variant,test_ssim,blurriness_t1,final_val_loss\n";
    for (const std::string& flags : cfg_.variants) {
      const std::string arm = arm_name(flags);
      double val_loss = 0;
      {
        std::ifstream f(out_ / "train" / arm / "phase2" / "history.csv");
        std::string line, last;
        std::getline(f, line);  // header
        while (std::getline(f, line)) {
          if (line.find(",-1,") != std::string::npos) last = line;
        }
        if (!last.empty())
          val_loss = std::stod(last.substr(last.rfind(',') + 1));
      }
      csv += flags + "," + fmt(arm_ssim[arm]) + "," + fmt(arm_blur[arm]) + "," +
             fmt(val_loss) + "\n";
    }
    std::ofstream f(dir / "ablation.csv", std::ios::trunc);
    f << csv;
  }

  // Bland-Altman over per-(region, phantom) ROI means; regions whose ground
  // truth sits outside the dictionary range are excluded for T1/T2.
  const auto t1g = cfg_.t1_grid();
  const auto t2g = cfg_.t2_grid();
  struct MapKind {
    const char* name;
    RGrid mapping::QuantMaps::*field;
  };
  const MapKind kinds[] = {{"t1", &mapping::QuantMaps::t1_ms},
                           {"t2", &mapping::QuantMaps::t2_ms},
                           {"t2s", &mapping::QuantMaps::t2s_ms},
                           {"qsm", &mapping::QuantMaps::chi_ppm}};

  json summary;
  for (const MapKind& kind : kinds) {
    // pull ROI means for every arm
    std::map<std::string, std::map<std::string, double>> roi_values;  // arm -> key -> value
    std::vector<std::string> keys;
    for (int i = 0; i < cfg_.n_test_phantoms; ++i) {
      const PhantomSet ps = load_phantom("test", i);
      std::vector<int> regions;
      for (const auto& [label, tc] : ps.ph.classes) {
        // evaluation ROIs are tissue structures; CSF is not one (the
        // reference ROI sets contain none) and its T1/T2/T2* sit outside
        // the estimable ranges of the dictionary and the short echo train
        if (tc.name == "CSF") continue;
        if (std::string(kind.name) == "t1" &&
            (tc.t1_ms < t1g.front() || tc.t1_ms > t1g.back()))
          continue;
        if (std::string(kind.name) == "t2" &&
            (tc.t2_ms < t2g.front() || tc.t2_ms > t2g.back()))
          continue;
        regions.push_back(label);
      }
      auto add_arm = [&](const std::string& arm) {
        const auto maps = load_maps(arm, i);
        const auto stats = metrics::roi_stats(maps.*(kind.field), ps.ph.labels,
                                              maps.valid, regions);
        for (const auto& [label, row] : stats) {
          const std::string key =
              "r" + std::to_string(label) + "_p" + std::to_string(i);
          roi_values[arm][key] = row.mean;
          if (arm == "gt") keys.push_back(key);
        }
      };
      add_arm("gt");
      for (const std::string& arm : arms) add_arm(arm);
    }

    std::vector<std::pair<std::string, std::string>> comparisons;
    for (const std::string& arm : arms)
      if (arm != "full") comparisons.emplace_back("full", arm);
    for (const std::string& arm : arms) comparisons.emplace_back("gt", arm);

    std::string csv = "comparison,region_phantom,value_a,value_b,mean,diff\n";
    for (const auto& [a, b] : comparisons) {
      std::vector<double> va, vb;
      for (const std::string& key : keys) {
        va.push_back(roi_values[a].at(key));
        vb.push_back(roi_values[b].at(key));
      }
      const auto ba = metrics::bland_altman(va, vb);
      const std::string cname = a + "_vs_" + b;
      for (size_t k = 0; k < keys.size(); ++k)
        csv += cname + "," + keys[k] + "," + fmt(va[k]) + "," + fmt(vb[k]) +
               "," + fmt(ba.pairs[k].first) + "," + fmt(ba.pairs[k].second) +
               "\n";
      summary[kind.name][cname] = {{"bias", ba.bias},
                                   {"sd", ba.sd},
                                   {"loa_low", ba.loa_low},
                                   {"loa_high", ba.loa_high},
                                   {"n", ba.n}};
    }
    std::ofstream f(dir / ("bland_altman_" + std::string(kind.name) + ".csv"),
                    std::ios::trunc);
    f << csv;
  }
  io::write_json(dir / "bland_altman_summary.json", summary);
}

}  // namespace mclaro::pipeline
