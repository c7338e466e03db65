#include "mclaro/recon.hpp"

#include <cmath>

namespace mclaro::recon {
namespace {

using diff::Tensor;

Tensor he_kernel(int cout, int cin, int k, Rng& rng, double gain = 1.0) {
  Tensor t = Tensor::real({cout, cin, k, k});
  const double std = gain * std::sqrt(2.0 / (cin * k * k));
  for (auto& v : t.re) v = std * rng.normal();
  return t;
}

}  // namespace

NetParams init_net_params(ParamStore& store, const NetConfig& cfg, Rng& rng) {
  const int nf = cfg.n_features;
  NetParams p;
  auto kparam = [&](const char* name, int co, int ci, double gain = 1.0) {
    return store.add(name, "conv_kernel", he_kernel(co, ci, 3, rng, gain));
  };
  auto bparam = [&](const char* name, int co) {
    return store.add(name, "conv_bias", Tensor::real({co}));
  };
  p.nm_k = kparam("fuse_echo_k", nf, 2);
  p.nm_b = bparam("fuse_echo_b", nf);
  p.nh_k = kparam("fuse_hidden_k", nf, nf);
  p.nh_b = bparam("fuse_hidden_b", nf);
  p.ns_k = kparam("fuse_single_k", nf, 2);
  p.ns_b = bparam("fuse_single_b", nf);

  const int cin = cfg.n_contrasts * nf;
  p.e1_k = kparam("enc1_k", cfg.width1, cin);
  p.e1_b = bparam("enc1_b", cfg.width1);
  p.e2_k = kparam("enc2_k", cfg.width1, cfg.width1);
  p.e2_b = bparam("enc2_b", cfg.width1);
  p.m1_k = kparam("mid1_k", cfg.width2, cfg.width1);
  p.m1_b = bparam("mid1_b", cfg.width2);
  p.m2_k = kparam("mid2_k", cfg.width2, cfg.width2);
  p.m2_b = bparam("mid2_b", cfg.width2);
  p.d1_k = kparam("dec1_k", cfg.width1, cfg.width1 + cfg.width2);
  p.d1_b = bparam("dec1_b", cfg.width1);
  p.d2_k = kparam("dec2_k", cfg.width1, cfg.width1);
  p.d2_b = bparam("dec2_b", cfg.width1);
  // near-zero residual head: the untrained denoiser passes images through
  p.fin_k = kparam("final_k", 2 * cfg.n_contrasts, cfg.width1, 1e-3);
  p.fin_b = bparam("final_b", 2 * cfg.n_contrasts);

  for (int k = 0; k < cfg.n_unrolls; ++k) {
    p.rho_log.push_back(store.add("rho_log_" + std::to_string(k), "admm_rho",
                                  Tensor::scalar(std::log(cfg.rho_init))));
  }
  return p;
}

std::vector<CGrid> normalize_coils(const std::vector<CGrid>& coils2d) {
  if (coils2d.empty()) throw std::invalid_argument("normalize_coils: no coils");
  const auto& shape = coils2d[0].shape();
  RGrid rss(shape, 0.0);
  for (const auto& s : coils2d)
    for (std::int64_t i = 0; i < s.numel(); ++i) rss[i] += std::norm(s[i]);
  std::vector<CGrid> out;
  out.reserve(coils2d.size());
  for (const auto& s : coils2d) {
    CGrid n(shape);
    for (std::int64_t i = 0; i < s.numel(); ++i) {
      const double r = std::sqrt(rss[i]);
      if (!(r > 0))
        throw std::runtime_error("normalize_coils: zero RSS on grid");
      n[i] = s[i] / r;
    }
    out.push_back(std::move(n));
  }
  return out;
}

std::vector<Var> forward_op(Graph& g, const SliceModel& m,
                            const std::vector<Var>& x) {
  const int nj = (int)m.masks.size();
  const int nc = (int)m.coils.size();
  if ((int)x.size() != nj)
    throw std::invalid_argument("forward_op: contrast count mismatch");
  std::vector<Var> y;
  y.reserve((size_t)nj * nc);
  for (int j = 0; j < nj; ++j)
    for (int c = 0; c < nc; ++c)
      y.push_back(g.mul_real(g.fft2c(g.mul(m.coils[c], x[j])), m.masks[j]));
  return y;
}

std::vector<Var> adjoint_op(Graph& g, const SliceModel& m,
                            const std::vector<Var>& y) {
  const int nj = (int)m.masks.size();
  const int nc = (int)m.coils.size();
  if ((int)y.size() != nj * nc)
    throw std::invalid_argument("adjoint_op: sample count mismatch");
  std::vector<Var> x;
  x.reserve(nj);
  for (int j = 0; j < nj; ++j) {
    Var acc;
    for (int c = 0; c < nc; ++c) {
      Var t = g.mul(g.conj(m.coils[c]),
                    g.ifft2c(g.mul_real(y[(size_t)j * nc + c], m.masks[j])));
      acc = acc.valid() ? g.add(acc, t) : t;
    }
    x.push_back(acc);
  }
  return x;
}

namespace {

// A^H A x + rho x for one contrast; the binary mask is applied once since
// it is idempotent.
Var normal_op(Graph& g, const SliceModel& m, int j, Var x, Var rho_scalar,
              double lambda) {
  Var acc;
  const int nc = (int)m.coils.size();
  for (int c = 0; c < nc; ++c) {
    Var t = g.mul(
        g.conj(m.coils[c]),
        g.ifft2c(g.mul_real(g.fft2c(g.mul(m.coils[c], x)), m.masks[j])));
    acc = acc.valid() ? g.add(acc, t) : t;
  }
  if (rho_scalar.valid()) acc = g.add(acc, g.mul_scalar_node(x, rho_scalar));
  if (lambda > 0) acc = g.add(acc, g.scale(x, lambda));
  return acc;
}

// Adjoint of already-masked data (y carries zeros off-mask).
std::vector<Var> adjoint_masked(Graph& g, const SliceModel& m,
                                const std::vector<Var>& y) {
  const int nj = (int)m.masks.size();
  const int nc = (int)m.coils.size();
  std::vector<Var> x;
  x.reserve(nj);
  for (int j = 0; j < nj; ++j) {
    Var acc;
    for (int c = 0; c < nc; ++c) {
      Var t = g.mul(g.conj(m.coils[c]), g.ifft2c(y[(size_t)j * nc + c]));
      acc = acc.valid() ? g.add(acc, t) : t;
    }
    x.push_back(acc);
  }
  return x;
}

}  // namespace

std::vector<Var> cg_sense(Graph& g, const SliceModel& m,
                          const std::vector<Var>& y, double lambda, int n_iter,
                          double tol) {
  if (lambda < 0) throw std::invalid_argument("cg_sense: lambda must be >= 0");
  std::vector<Var> rhs = adjoint_op(g, m, y);
  std::vector<Var> x;
  x.reserve(rhs.size());
  for (int j = 0; j < (int)rhs.size(); ++j) {
    auto apply = [&, j](Var v) { return normal_op(g, m, j, v, Var{}, lambda); };
    x.push_back(g.cg_solve(apply, rhs[j], n_iter, tol));
  }
  return x;
}

NetVars bind_params(Graph& g, const ParamStore& store, bool grads) {
  NetVars nv;
  nv.vars.reserve(store.size());
  for (size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at((int)i);
    nv.vars.push_back(g.leaf(p.value, grads && p.trainable));
  }
  return nv;
}

std::vector<Var> fuse_features(Graph& g, const NetConfig& cfg,
                               const NetParams& p, const NetVars& nv,
                               const std::vector<Var>& images) {
  const int ne = cfg.n_echoes;
  const int nj = cfg.n_contrasts;
  if ((int)images.size() != nj)
    throw std::invalid_argument("fuse_features: contrast count mismatch");
  if (nj != ne + 3)
    throw std::invalid_argument("fuse_features: contrasts must be echoes + 3");
  const auto& shape = g.val(images[0]).shape;
  const int h = shape[0], w = shape[1];

  std::vector<Var> feats(nj);
  // multi-echo chain
  Var hidden;
  for (int e = 0; e < ne; ++e) {
    Var fe = g.conv2d(g.pack_ri(images[e]), nv.vars[p.nm_k], nv.vars[p.nm_b]);
    if (cfg.fusion) {
      Var hprev = hidden.valid()
                      ? g.conv2d(hidden, nv.vars[p.nh_k], nv.vars[p.nh_b])
                      : g.bias_planes(nv.vars[p.nh_b], h, w);
      hidden = g.relu(g.add(fe, hprev));
    } else {
      hidden = g.relu(fe);
    }
    feats[e] = hidden;
  }
  // single-echo contrasts share one conv
  for (int s = 0; s < 3; ++s)
    feats[ne + s] =
        g.conv2d(g.pack_ri(images[ne + s]), nv.vars[p.ns_k], nv.vars[p.ns_b]);

  if (!cfg.fusion) return feats;

  // additive exchange; the single-echo update uses the pre-update first echo
  Var singles = g.add(g.add(feats[ne], feats[ne + 1]), feats[ne + 2]);
  Var echo1 = feats[0];
  std::vector<Var> out(nj);
  for (int e = 0; e < ne; ++e) out[e] = g.add(feats[e], singles);
  for (int s = 0; s < 3; ++s) out[ne + s] = g.add(feats[ne + s], echo1);
  return out;
}

namespace {

std::vector<Var> denoise(Graph& g, const NetConfig& cfg, const NetParams& p,
                         const NetVars& nv, const std::vector<Var>& v) {
  std::vector<Var> feats = fuse_features(g, cfg, p, nv, v);
  Var cat = g.concat_ch(feats);
  Var e1 = g.relu(g.conv2d(cat, nv.vars[p.e1_k], nv.vars[p.e1_b]));
  Var e2 = g.relu(g.conv2d(e1, nv.vars[p.e2_k], nv.vars[p.e2_b]));
  Var dn = g.avg_pool2(e2);
  Var m1 = g.relu(g.conv2d(dn, nv.vars[p.m1_k], nv.vars[p.m1_b]));
  Var m2 = g.relu(g.conv2d(m1, nv.vars[p.m2_k], nv.vars[p.m2_b]));
  Var up = g.upsample2(m2);
  Var skip = g.concat_ch({e2, up});
  Var d1 = g.relu(g.conv2d(skip, nv.vars[p.d1_k], nv.vars[p.d1_b]));
  Var d2 = g.relu(g.conv2d(d1, nv.vars[p.d2_k], nv.vars[p.d2_b]));
  Var res = g.conv2d(d2, nv.vars[p.fin_k], nv.vars[p.fin_b]);
  // residual head: z_j = v_j + correction_j
  std::vector<Var> z(v.size());
  for (int j = 0; j < (int)v.size(); ++j)
    z[j] = g.add(v[j], g.unpack_ri(g.slice_ch(res, 2 * j, 2 * j + 2)));
  return z;
}

}  // namespace

std::vector<Var> admm_unrolled(Graph& g, const SliceModel& m,
                               const std::vector<Var>& y, const NetConfig& cfg,
                               const NetParams& p, const NetVars& nv) {
  const int nj = cfg.n_contrasts;
  if ((int)m.masks.size() != nj)
    throw std::invalid_argument("admm_unrolled: contrast count mismatch");

  std::vector<Var> x0 = adjoint_masked(g, m, y);
  std::vector<Var> x = x0;
  std::vector<Var> z = x0;
  std::vector<Var> u(nj);
  for (int j = 0; j < nj; ++j) u[j] = g.constant_like_zero(x0[j]);

  for (int k = 0; k < cfg.n_unrolls; ++k) {
    Var rho = g.exp(nv.vars[p.rho_log[k]]);  // keeps rho_k > 0
    for (int j = 0; j < nj; ++j) {
      Var rhs = g.add(x0[j], g.mul_scalar_node(g.sub(z[j], u[j]), rho));
      auto apply = [&, j](Var v) { return normal_op(g, m, j, v, rho, 0.0); };
      x[j] = g.cg_solve(apply, rhs, cfg.cg_iters);
    }
    std::vector<Var> v(nj);
    for (int j = 0; j < nj; ++j) v[j] = g.add(x[j], u[j]);
    z = denoise(g, cfg, p, nv, v);
    for (int j = 0; j < nj; ++j) u[j] = g.sub(v[j], z[j]);
  }
  return z;
}

ContrastKSpace blocks_to_contrasts(const seqsim::KSpaceSet& acquired,
                                   const sampling::AcquisitionSchedule& sched) {
  const int nj = (int)sched.implied_masks.size();
  if ((int)acquired.data.size() != nj)
    throw std::invalid_argument("blocks_to_contrasts: contrast count mismatch");
  ContrastKSpace out;
  out.validity = sched.implied_masks;
  out.y.resize(nj);
  for (int j = 0; j < nj; ++j) {
    const auto& mask = sched.implied_masks[j];
    for (const auto& coil : acquired.data[j]) {
      const auto& shape = coil.shape();
      if (shape.size() != 3 || shape[1] != mask.dim(0) ||
          shape[2] != mask.dim(1))
        throw std::invalid_argument("blocks_to_contrasts: dims mismatch");
      CGrid y(shape);
      for (int i = 0; i < shape[0]; ++i)
        for (int a = 0; a < shape[1]; ++a)
          for (int b = 0; b < shape[2]; ++b)
            y.at3(i, a, b) =
                mask.at2(a, b) ? coil.at3(i, a, b) : Cplx{};
      out.y[j].push_back(std::move(y));
    }
  }
  return out;
}

}  // namespace mclaro::recon
