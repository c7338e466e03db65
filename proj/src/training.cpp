#include "mclaro/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mclaro/io.hpp"
#include "mclaro/metrics.hpp"

namespace mclaro::training {

using diff::Graph;
using diff::ParamStore;
using diff::Tensor;
using recon::NetParams;
using recon::NetVars;
using recon::Var;

namespace {

RGrid support_real(const MaskGrid& m) {
  RGrid r(m.shape());
  for (std::int64_t i = 0; i < m.numel(); ++i) r[i] = m[i] ? 1.0 : 0.0;
  return r;
}

// logit of the multi-level baseline density: the starting point of the
// learnable weights, and the frozen value when mask optimization is off.
Tensor initial_weights(const MaskGrid& support, const TrainConfig& cfg) {
  const RGrid density = sampling::baseline_vd_density(
      support.dim(0), support.dim(1), 1.0 / cfg.r, cfg.vd_levels);
  Tensor w = Tensor::real(support.shape());
  for (std::int64_t i = 0; i < w.numel(); ++i) {
    const double p =
        std::min(1.0 - sampling::kProbEps,
                 std::max(sampling::kProbEps, density[i]));
    w.re[i] = std::log(p / (1.0 - p)) / cfg.slope_a;
  }
  return w;
}

NetParams find_net_params(const ParamStore& store, const TrainConfig& cfg) {
  NetParams p;
  auto idx = [&](const char* name) {
    const int i = store.find(name);
    if (i < 0)
      throw std::runtime_error(std::string("checkpoint missing param ") + name);
    return i;
  };
  p.nm_k = idx("fuse_echo_k");
  p.nm_b = idx("fuse_echo_b");
  p.nh_k = idx("fuse_hidden_k");
  p.nh_b = idx("fuse_hidden_b");
  p.ns_k = idx("fuse_single_k");
  p.ns_b = idx("fuse_single_b");
  p.e1_k = idx("enc1_k");
  p.e1_b = idx("enc1_b");
  p.e2_k = idx("enc2_k");
  p.e2_b = idx("enc2_b");
  p.m1_k = idx("mid1_k");
  p.m1_b = idx("mid1_b");
  p.m2_k = idx("mid2_k");
  p.m2_b = idx("mid2_b");
  p.d1_k = idx("dec1_k");
  p.d1_b = idx("dec1_b");
  p.d2_k = idx("dec2_k");
  p.d2_b = idx("dec2_b");
  p.fin_k = idx("final_k");
  p.fin_b = idx("final_b");
  for (int k = 0; k < cfg.net.n_unrolls; ++k)
    p.rho_log.push_back(idx(("rho_log_" + std::to_string(k)).c_str()));
  return p;
}

std::vector<int> weight_param_ids(const ParamStore& store, int n_contrasts) {
  std::vector<int> ids;
  for (int j = 0; j < n_contrasts; ++j) {
    const int i = store.find("sample_w_" + std::to_string(j));
    if (i < 0) throw std::runtime_error("checkpoint missing sampling weights");
    ids.push_back(i);
  }
  return ids;
}

Var pack_set(Graph& g, const std::vector<Var>& images) {
  std::vector<Var> planes;
  planes.reserve(images.size());
  for (Var im : images) planes.push_back(g.pack_ri(im));
  return g.concat_ch(planes);
}

double run_epoch_val(const Dataset& data, const MaskGrid& support,
                     const TrainConfig& cfg, const NetParams& net_params,
                     ParamStore& store,
                     const std::vector<MaskGrid>* fixed_masks,
                     std::uint64_t draw_seed) {
  if (data.val.empty()) return 0.0;
  double acc = 0;
  int n = 0;
  for (const Sample& s : data.val) {
    Graph g;
    NetVars nv = recon::bind_params(g, store, false);
    std::vector<Var> masks(data.n_contrasts);
    const auto w_ids = weight_param_ids(store, data.n_contrasts);
    Rng rng = Rng::derive(draw_seed, 0x7a1 + n);
    for (int j = 0; j < data.n_contrasts; ++j) {
      if (fixed_masks) {
        masks[j] = g.constant(Tensor::from(support_real((*fixed_masks)[j])));
      } else {
        Var w = nv.vars[w_ids[j]];
        Var p = prob_graph(g, w, support, cfg.slope_a, 1.0 / cfg.r);
        masks[j] = g.ste_binarize(p, rng, cfg.calib_block);
      }
    }
    StepGraph sg = build_step(g, s, support, cfg, net_params, nv, masks);
    acc += g.val(sg.loss).scalar_value();
    n++;
  }
  return acc / n;
}

}  // namespace

Var prob_graph(Graph& g, Var w, const MaskGrid& support, double a,
               double target_ratio, bool renormalize) {
  Var s = g.sigmoid(g.scale(w, a));
  if (!renormalize) return s;
  s = g.clamp(s, sampling::kProbEps, 1.0 - sampling::kProbEps);
  const RGrid sup = support_real(support);
  Var m = g.masked_mean(s, sup);
  const double mval = g.val(m).scalar_value();
  Var p;
  if (mval >= target_ratio) {
    // shrink toward zero: p = s * (t / m)
    Var f = g.div(g.constant(Tensor::scalar(target_ratio)), m);
    p = g.mul_scalar_node(s, f);
  } else {
    // shrink the complement: p = 1 - (1-s) * (1-t)/(1-m)
    Var f = g.div(g.constant(Tensor::scalar(1.0 - target_ratio)),
                  g.add_const(g.neg(m), 1.0));
    p = g.add_const(g.neg(g.mul_scalar_node(g.add_const(g.neg(s), 1.0), f)),
                    1.0);
  }
  return g.mul(p, g.constant(Tensor::from(sup)));
}

StepGraph build_step(Graph& g, const Sample& s, const MaskGrid& support,
                     const TrainConfig& cfg, const NetParams& net_params,
                     const NetVars& nv, const std::vector<Var>& mask_vars) {
  const int nj = (int)s.target.size();
  const int nc = (int)s.coils.size();
  recon::SliceModel model;
  model.ny = s.target[0].dim(0);
  model.nz = s.target[0].dim(1);
  model.masks = mask_vars;
  for (int c = 0; c < nc; ++c)
    model.coils.push_back(g.constant(Tensor::from(s.coils[c])));

  // retrospective under-sampling of the stored full k-space
  std::vector<Var> y;
  y.reserve((size_t)nj * nc);
  for (int j = 0; j < nj; ++j)
    for (int c = 0; c < nc; ++c)
      y.push_back(g.mul_real(g.constant(Tensor::from(s.y[j][c])),
                             mask_vars[j]));

  recon::NetConfig net = cfg.net;
  net.fusion = cfg.fusion;
  net.n_contrasts = nj;
  net.n_echoes = nj - 3;

  StepGraph sg;
  sg.recon_images = recon::admm_unrolled(g, model, y, net, net_params, nv);

  std::vector<Var> ref;
  ref.reserve(nj);
  for (int j = 0; j < nj; ++j)
    ref.push_back(g.constant(Tensor::from(s.target[j])));
  Var ssim = g.ssim_channelwise(pack_set(g, sg.recon_images), pack_set(g, ref));
  sg.loss = g.add_const(g.neg(ssim), 1.0);
  return sg;
}

Checkpoint train_phase1(const Dataset& data, const MaskGrid& support,
                        const TrainConfig& cfg) {
  if (data.train.empty()) throw std::invalid_argument("train: empty dataset");
  Checkpoint ckpt;
  ckpt.phase = 1;

  Rng init_rng = Rng::derive(cfg.seed, 0x11);
  recon::NetConfig net = cfg.net;
  net.fusion = cfg.fusion;
  net.n_contrasts = data.n_contrasts;
  net.n_echoes = data.n_echoes;
  NetParams net_params = recon::init_net_params(ckpt.params, net, init_rng);
  const Tensor w0 = initial_weights(support, cfg);
  for (int j = 0; j < data.n_contrasts; ++j)
    ckpt.params.add("sample_w_" + std::to_string(j), "sampling_weights", w0,
                    cfg.mask_opt);

  diff::Adam adam(cfg.lr);
  int global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs_phase1; ++epoch) {
    double epoch_loss = 0;
    for (int si = 0; si < (int)data.train.size(); ++si) {
      const Sample& s = data.train[si];
      Graph g;
      NetVars nv = recon::bind_params(g, ckpt.params, true);
      const auto w_ids = weight_param_ids(ckpt.params, data.n_contrasts);
      // fresh stochastic mask draw every step
      Rng draw = Rng::derive(cfg.seed, 0x9000 + global_step);
      std::vector<Var> masks(data.n_contrasts);
      for (int j = 0; j < data.n_contrasts; ++j) {
        Var p = prob_graph(g, nv.vars[w_ids[j]], support, cfg.slope_a,
                           1.0 / cfg.r);
        masks[j] = g.ste_binarize(p, draw, cfg.calib_block);
      }
      StepGraph sg = build_step(g, s, support, cfg, net_params, nv, masks);
      const double loss = g.val(sg.loss).scalar_value();
      if (!std::isfinite(loss))
        throw std::runtime_error("train_phase1: non-finite loss at step " +
                                 std::to_string(global_step));
      g.backward(sg.loss);
      std::vector<std::pair<int, Tensor>> grads;
      for (size_t pi = 0; pi < ckpt.params.size(); ++pi) {
        if (!ckpt.params.at((int)pi).trainable) continue;
        const Tensor& gt = g.grad(nv.vars[pi]);
        if (gt.numel() > 0) grads.emplace_back((int)pi, gt);
      }
      adam.step(ckpt.params, grads);
      epoch_loss += loss;
      ckpt.history.push_back({epoch, global_step, loss, 0.0});
      global_step++;
    }
    const double val = run_epoch_val(data, support, cfg, net_params,
                                     ckpt.params, nullptr,
                                     cfg.seed + 0xe0 + epoch);
    ckpt.history.push_back(
        {epoch, -1, epoch_loss / (double)data.train.size(), val});
  }

  // final probability maps
  for (int j = 0; j < data.n_contrasts; ++j) {
    Graph g;
    Var w = g.leaf(ckpt.params.at(ckpt.params.find("sample_w_" +
                                                   std::to_string(j)))
                       .value,
                   false);
    Var p = prob_graph(g, w, support, cfg.slope_a, 1.0 / cfg.r);
    ckpt.prob_maps.push_back(g.val(p).to_rgrid());
  }
  return ckpt;
}

std::vector<MaskGrid> draw_phase2_masks(const std::vector<RGrid>& probs,
                                        const MaskGrid& support,
                                        const TrainConfig& cfg) {
  std::int64_t n_sup = 0;
  for (std::int64_t i = 0; i < support.numel(); ++i)
    if (support[i]) n_sup++;
  std::vector<MaskGrid> masks;
  for (size_t j = 0; j < probs.size(); ++j) {
    Rng rng = Rng::derive(cfg.seed, 0xf2a0 + j);
    MaskGrid best;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      MaskGrid u = sampling::draw_mask(probs[j], rng, 0);
      std::int64_t count = 0;
      for (std::int64_t i = 0; i < u.numel(); ++i)
        if (u[i] && support[i]) count++;
      const double ratio = (double)count / (double)n_sup;
      if (std::abs(ratio - 1.0 / cfg.r) <= cfg.phase2_ratio_tol) {
        best = std::move(u);
        ok = true;
      }
    }
    if (!ok)
      throw std::runtime_error("phase2: could not draw a mask at the target "
                               "ratio; probability map is off target");
    if (cfg.calib_block > 0) {
      const int ny = support.dim(0), nz = support.dim(1);
      const int y0 = ny / 2 - cfg.calib_block / 2,
                z0 = nz / 2 - cfg.calib_block / 2;
      for (int i = std::max(0, y0); i < std::min(ny, y0 + cfg.calib_block); ++i)
        for (int k = std::max(0, z0); k < std::min(nz, z0 + cfg.calib_block);
             ++k)
          best.at2(i, k) = 1;
    }
    masks.push_back(std::move(best));
  }
  return masks;
}

Checkpoint train_phase2(const Dataset& data, const MaskGrid& support,
                        const TrainConfig& cfg, const Checkpoint& phase1) {
  if (phase1.phase != 1 || phase1.prob_maps.empty())
    throw std::invalid_argument("train_phase2: needs a phase-1 checkpoint");
  Checkpoint ckpt;
  ckpt.phase = 2;
  ckpt.params = phase1.params;
  ckpt.prob_maps = phase1.prob_maps;
  ckpt.fixed_masks = draw_phase2_masks(phase1.prob_maps, support, cfg);

  // network fine-tuning only
  for (size_t pi = 0; pi < ckpt.params.size(); ++pi)
    if (ckpt.params.at((int)pi).role == "sampling_weights")
      ckpt.params.at((int)pi).trainable = false;

  const NetParams net_params = find_net_params(ckpt.params, cfg);
  diff::Adam adam(cfg.lr);
  int global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs_phase2; ++epoch) {
    double epoch_loss = 0;
    for (const Sample& s : data.train) {
      Graph g;
      NetVars nv = recon::bind_params(g, ckpt.params, true);
      std::vector<Var> masks(data.n_contrasts);
      for (int j = 0; j < data.n_contrasts; ++j)
        masks[j] =
            g.constant(Tensor::from(support_real(ckpt.fixed_masks[j])));
      StepGraph sg = build_step(g, s, support, cfg, net_params, nv, masks);
      const double loss = g.val(sg.loss).scalar_value();
      if (!std::isfinite(loss))
        throw std::runtime_error("train_phase2: non-finite loss");
      g.backward(sg.loss);
      std::vector<std::pair<int, Tensor>> grads;
      for (size_t pi = 0; pi < ckpt.params.size(); ++pi) {
        if (!ckpt.params.at((int)pi).trainable) continue;
        const Tensor& gt = g.grad(nv.vars[pi]);
        if (gt.numel() > 0) grads.emplace_back((int)pi, gt);
      }
      adam.step(ckpt.params, grads);
      epoch_loss += loss;
      ckpt.history.push_back({epoch, global_step, loss, 0.0});
      global_step++;
    }
    const double val =
        run_epoch_val(data, support, cfg, net_params, ckpt.params,
                      &ckpt.fixed_masks, cfg.seed + 0xe0 + epoch);
    ckpt.history.push_back(
        {epoch, -1, epoch_loss / (double)data.train.size(), val});
  }
  return ckpt;
}

std::vector<CGrid> reconstruct_slice(const Sample& s,
                                     const std::vector<MaskGrid>& masks,
                                     const TrainConfig& cfg,
                                     const Checkpoint& ckpt) {
  Graph g;
  NetVars nv = recon::bind_params(g, ckpt.params, false);
  const NetParams net_params = find_net_params(ckpt.params, cfg);
  std::vector<Var> mask_vars(masks.size());
  for (size_t j = 0; j < masks.size(); ++j)
    mask_vars[j] = g.constant(Tensor::from(support_real(masks[j])));
  MaskGrid all(s.target[0].shape(), 1);
  StepGraph sg = build_step(g, s, all, cfg, net_params, nv, mask_vars);
  std::vector<CGrid> out;
  for (Var v : sg.recon_images) out.push_back(g.val(v).to_cgrid());
  return out;
}

bool parse_ablation_flags(const std::string& flags, bool& fusion,
                          bool& mask_opt) {
  if (flags.size() != 2 || (flags[0] != '0' && flags[0] != '1') ||
      (flags[1] != '0' && flags[1] != '1'))
    return false;
  fusion = flags[0] == '1';
  mask_opt = flags[1] == '1';
  return true;
}

std::vector<AblationVariant> run_ablation(
    const Dataset& data, const MaskGrid& support, const TrainConfig& base,
    const std::vector<std::string>& variants) {
  std::vector<AblationVariant> out;
  for (const std::string& flags : variants) {
    TrainConfig cfg = base;
    if (!parse_ablation_flags(flags, cfg.fusion, cfg.mask_opt))
      throw std::invalid_argument("run_ablation: bad flags " + flags);
    Checkpoint p1 = train_phase1(data, support, cfg);
    AblationVariant v;
    v.flags = flags;
    v.checkpoint = train_phase2(data, support, cfg, p1);
    out.push_back(std::move(v));
  }
  return out;
}

void Checkpoint::save(const std::string& dir,
                      const std::map<std::string, std::string>& sidecar) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  params.save((fs::path(dir) / "params").string(), sidecar);
  auto with_extra = [&](io::json j) {
    for (const auto& [k, v] : sidecar) j[k] = v;
    return j;
  };
  io::json meta;
  meta["phase"] = phase;
  meta["n_masks"] = fixed_masks.size();
  meta["n_probs"] = prob_maps.size();
  io::write_json(fs::path(dir) / "checkpoint.json", meta);
  for (size_t j = 0; j < fixed_masks.size(); ++j)
    io::save_u8(fs::path(dir) / ("mask_" + std::to_string(j) + ".u8"),
                fixed_masks[j], with_extra({{"role", "fixed_sampling_mask"}}));
  for (size_t j = 0; j < prob_maps.size(); ++j)
    io::save_f32(fs::path(dir) / ("prob_" + std::to_string(j) + ".f32"),
                 prob_maps[j], with_extra({{"role", "sampling_probability"}}));
  std::string csv = "epoch,step,loss,val_loss\n";
  for (const auto& row : history) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g\n", row.epoch, row.step,
                  row.loss, row.val_loss);
    csv += buf;
  }
  std::ofstream f(fs::path(dir) / "history.csv", std::ios::trunc);
  f << csv;
}

Checkpoint Checkpoint::load(const std::string& dir) {
  namespace fs = std::filesystem;
  Checkpoint ckpt;
  ckpt.params = ParamStore::load((fs::path(dir) / "params").string());
  const io::json meta = io::read_json(fs::path(dir) / "checkpoint.json");
  ckpt.phase = meta.at("phase").get<int>();
  const size_t n_masks = meta.at("n_masks").get<size_t>();
  const size_t n_probs = meta.at("n_probs").get<size_t>();
  for (size_t j = 0; j < n_masks; ++j)
    ckpt.fixed_masks.push_back(
        io::load_u8(fs::path(dir) / ("mask_" + std::to_string(j) + ".u8")));
  for (size_t j = 0; j < n_probs; ++j)
    ckpt.prob_maps.push_back(
        io::load_f32(fs::path(dir) / ("prob_" + std::to_string(j) + ".f32")));
  return ckpt;
}

}  // namespace mclaro::training
