#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mclaro/fft.hpp"
#include "mclaro/phantom.hpp"
#include "mclaro/recon.hpp"
#include "mclaro/sampling.hpp"
#include "testutil.hpp"

using namespace mclaro;
using namespace mclaro::diff;
using namespace mclaro::recon;

namespace {

struct Fixture {
  Graph g;
  SliceModel model;
  std::vector<CGrid> coils;
  std::vector<CGrid> truth;
  std::vector<Var> y_full;  // forward data with masks all ones

  Fixture(int nj, int nc, int n, Rng& rng, bool random_masks = false) {
    std::vector<CGrid> raw;
    for (int c = 0; c < nc; ++c) {
      CGrid s({n, n});
      for (std::int64_t i = 0; i < s.numel(); ++i)
        s[i] = Cplx(1.0 + 0.3 * rng.normal(), 0.3 * rng.normal());
      raw.push_back(std::move(s));
    }
    coils = normalize_coils(raw);
    for (const auto& c : coils) model.coils.push_back(g.constant(Tensor::from(c)));
    model.ny = model.nz = n;
    for (int j = 0; j < nj; ++j) {
      RGrid m({n, n}, 1.0);
      if (random_masks)
        for (std::int64_t i = 0; i < m.numel(); ++i)
          m[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
      model.masks.push_back(g.constant(Tensor::from(m)));
    }
    for (int j = 0; j < nj; ++j) {
      CGrid t({n, n});
      for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = Cplx(rng.normal(), rng.normal());
      truth.push_back(std::move(t));
    }
    std::vector<Var> x;
    for (const auto& t : truth) x.push_back(g.constant(Tensor::from(t)));
    y_full = forward_op(g, model, x);
  }
};

}  // namespace

TEST_CASE("forward: flat single coil and full mask is the centered FFT") {
  Graph g;
  SliceModel m;
  m.ny = m.nz = 8;
  m.coils = {g.constant(Tensor::cplx({8, 8}, Cplx(1, 0)))};
  m.masks = {g.constant(Tensor::real({8, 8}, 1.0))};
  Rng rng(1);
  CGrid x({8, 8});
  for (std::int64_t i = 0; i < x.numel(); ++i)
    x[i] = Cplx(rng.normal(), rng.normal());
  const auto y = forward_op(g, m, {g.constant(Tensor::from(x))});
  const CGrid want = fft::fft2c(x);
  for (std::int64_t i = 0; i < want.numel(); ++i)
    REQUIRE(std::abs(g.val(y[0]).cx[i] - want[i]) < 1e-12);

  // zero mask zeroes the data
  Graph g2;
  SliceModel m2 = m;
  m2.coils = {g2.constant(Tensor::cplx({8, 8}, Cplx(1, 0)))};
  m2.masks = {g2.constant(Tensor::real({8, 8}, 0.0))};
  const auto y2 = forward_op(g2, m2, {g2.constant(Tensor::from(x))});
  for (const auto& v : g2.val(y2[0]).cx) REQUIRE(std::abs(v) == 0.0);
}

TEST_CASE("forward/adjoint pass the inner-product test") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Fixture f(2, 3, 8, rng, true);
    // random y in data space
    std::vector<Var> y;
    std::vector<Tensor> y0;
    for (size_t i = 0; i < f.y_full.size(); ++i) {
      Tensor t = Tensor::cplx({8, 8});
      for (auto& v : t.cx) v = Cplx(rng.normal(), rng.normal());
      y0.push_back(t);
      y.push_back(f.g.constant(t));
    }
    std::vector<Var> x;
    std::vector<Tensor> x0;
    for (int j = 0; j < 2; ++j) {
      Tensor t = Tensor::cplx({8, 8});
      for (auto& v : t.cx) v = Cplx(rng.normal(), rng.normal());
      x0.push_back(t);
      x.push_back(f.g.constant(t));
    }
    const auto ax = forward_op(f.g, f.model, x);
    const auto ahy = adjoint_op(f.g, f.model, y);
    Cplx lhs = 0, rhs = 0;
    for (size_t i = 0; i < ax.size(); ++i)
      for (std::int64_t k = 0; k < 64; ++k)
        lhs += std::conj(f.g.val(ax[i]).cx[k]) * y0[i].cx[k];
    for (size_t j = 0; j < ahy.size(); ++j)
      for (std::int64_t k = 0; k < 64; ++k)
        rhs += std::conj(x0[j].cx[k]) * f.g.val(ahy[j]).cx[k];
    REQUIRE(std::abs(lhs - rhs) < 1e-10);
  }
}

TEST_CASE("cg_sense recovers fully sampled noiseless data") {
  Rng rng(9);
  Fixture f(2, 4, 12, rng, false);
  const auto x = cg_sense(f.g, f.model, f.y_full, 0.0, 30, 1e-12);
  for (int j = 0; j < 2; ++j) {
    double num = 0, den = 0;
    for (std::int64_t i = 0; i < 144; ++i) {
      num += std::norm(f.g.val(x[j]).cx[i] - f.truth[j][i]);
      den += std::norm(f.truth[j][i]);
    }
    REQUIRE(std::sqrt(num / den) < 1e-8);
  }
}

TEST_CASE("cg_sense: zero data gives zero image") {
  Rng rng(11);
  Fixture f(1, 2, 8, rng);
  std::vector<Var> y;
  for (size_t i = 0; i < f.y_full.size(); ++i)
    y.push_back(f.g.constant(Tensor::cplx({8, 8})));
  const auto x = cg_sense(f.g, f.model, y, 1e-3, 10);
  for (const auto& v : f.g.val(x[0]).cx) REQUIRE(std::abs(v) == 0.0);
}

TEST_CASE("cg_sense beats the zero-filled adjoint under R=8") {
  Rng rng(13);
  const int n = 32;
  Graph g;
  SliceModel model;
  model.ny = model.nz = n;
  std::vector<CGrid> raw;
  for (int c = 0; c < 4; ++c) {
    CGrid s({n, n});
    for (int y = 0; y < n; ++y)
      for (int z = 0; z < n; ++z)
        s.at2(y, z) = Cplx(1.0 + 0.5 * std::sin(0.3 * y + c), 0.4 * std::cos(0.2 * z - c));
    raw.push_back(std::move(s));
  }
  const auto coils = normalize_coils(raw);
  for (const auto& c : coils) model.coils.push_back(g.constant(Tensor::from(c)));
  // smooth-ish truth
  CGrid truth({n, n});
  for (int y = 0; y < n; ++y)
    for (int z = 0; z < n; ++z)
      truth.at2(y, z) =
          Cplx(std::exp(-0.01 * ((y - 16) * (y - 16) + (z - 16) * (z - 16))), 0.0);
  // R=8-ish mask with dense center
  const auto density = sampling::baseline_vd_density(n, n, 0.125, 5);
  Rng mr(7);
  const auto mask = sampling::draw_mask(density, mr, 4);
  RGrid mreal(mask.shape());
  for (std::int64_t i = 0; i < mask.numel(); ++i) mreal[i] = mask[i];
  model.masks = {g.constant(Tensor::from(mreal))};

  const auto y = forward_op(g, model, {g.constant(Tensor::from(truth))});
  const auto xcg = cg_sense(g, model, y, 1e-4, 30);
  const auto xzf = adjoint_op(g, model, y);

  auto residual = [&](Var x) {
    const auto ax = forward_op(g, model, {x});
    double r = 0;
    for (size_t c = 0; c < ax.size(); ++c)
      for (std::int64_t i = 0; i < truth.numel(); ++i)
        r += std::norm(g.val(ax[c]).cx[i] - g.val(y[c]).cx[i]);
    return std::sqrt(r);
  };
  CHECK(residual(xzf[0]) > 10.0 * residual(xcg[0]));
}

namespace {

NetConfig tiny_net(int nj, bool fusion) {
  NetConfig cfg;
  cfg.n_unrolls = 2;
  cfg.cg_iters = 3;
  cfg.n_features = 4;
  cfg.width1 = 6;
  cfg.width2 = 8;
  cfg.n_contrasts = nj;
  cfg.n_echoes = nj - 3;
  cfg.fusion = fusion;
  return cfg;
}

}  // namespace

TEST_CASE("fuse_features: zeros, recurrence ablation, additive identity") {
  const int nj = 6, n = 8;
  Rng rng(17);
  NetConfig cfg = tiny_net(nj, true);
  ParamStore store;
  NetParams params = init_net_params(store, cfg, rng);
  // zero out every fusion weight and bias
  for (const char* name : {"fuse_echo_k", "fuse_echo_b", "fuse_hidden_k",
                           "fuse_hidden_b", "fuse_single_k", "fuse_single_b"}) {
    Param& p = store.at(store.find(name));
    for (auto& v : p.value.re) v = 0.0;
  }
  Graph g;
  NetVars nv = bind_params(g, store, false);
  std::vector<Var> images;
  for (int j = 0; j < nj; ++j)
    images.push_back(g.constant(Tensor::cplx({n, n})));
  const auto feats = fuse_features(g, cfg, params, nv, images);
  for (const auto& f : feats)
    for (const double v : g.val(f).re) REQUIRE(v == 0.0);

  // nonzero N_m, zero N_h: echo features degenerate to per-echo conv
  Rng rng2(19);
  ParamStore store2;
  NetParams params2 = init_net_params(store2, cfg, rng2);
  Param& nh = store2.at(store2.find("fuse_hidden_k"));
  for (auto& v : nh.value.re) v = 0.0;
  Param& nhb = store2.at(store2.find("fuse_hidden_b"));
  for (auto& v : nhb.value.re) v = 0.0;
  // single-echo images zero with zero single bias: exchange adds nothing
  Param& nsb = store2.at(store2.find("fuse_single_b"));
  for (auto& v : nsb.value.re) v = 0.0;
  Param& nsk = store2.at(store2.find("fuse_single_k"));
  for (auto& v : nsk.value.re) v = 0.0;

  Graph g2;
  NetVars nv2 = bind_params(g2, store2, false);
  std::vector<Var> images2;
  Rng ir(23);
  for (int j = 0; j < nj; ++j) {
    Tensor t = Tensor::cplx({n, n});
    if (j < nj - 3)
      for (auto& v : t.cx) v = Cplx(ir.normal(), ir.normal());
    images2.push_back(g2.constant(t));
  }
  NetConfig cfg_nof = cfg;
  cfg_nof.fusion = false;
  const auto with_fusion = fuse_features(g2, cfg, params2, nv2, images2);
  const auto without = fuse_features(g2, cfg_nof, params2, nv2, images2);
  for (int e = 0; e < cfg.n_echoes; ++e)
    for (std::int64_t i = 0; i < g2.val(with_fusion[e]).numel(); ++i)
      REQUIRE(g2.val(with_fusion[e]).re[i] ==
              doctest::Approx(g2.val(without[e]).re[i]).epsilon(1e-12));
}

TEST_CASE("fusion makes echo order matter") {
  const int nj = 6, n = 8;
  Rng rng(29);
  NetConfig cfg = tiny_net(nj, true);
  ParamStore store;
  NetParams params = init_net_params(store, cfg, rng);
  Graph g;
  NetVars nv = bind_params(g, store, false);
  std::vector<Var> images;
  Rng ir(31);
  for (int j = 0; j < nj; ++j) {
    Tensor t = Tensor::cplx({n, n});
    for (auto& v : t.cx) v = Cplx(ir.normal(), ir.normal());
    images.push_back(g.constant(t));
  }
  auto swapped = images;
  std::swap(swapped[0], swapped[1]);
  const auto f1 = fuse_features(g, cfg, params, nv, images);
  const auto f2 = fuse_features(g, cfg, params, nv, swapped);
  // compare echo-2 features (index 1 vs 1): recurrence order changes them
  double diff = 0;
  for (std::int64_t i = 0; i < g.val(f1[2]).numel(); ++i)
    diff = std::max(diff, std::abs(g.val(f1[2]).re[i] - g.val(f2[2]).re[i]));
  CHECK(diff > 1e-9);
}

TEST_CASE("admm: K=0 returns the zero-filled adjoint init") {
  Rng rng(37);
  Fixture f(5, 2, 8, rng, true);
  NetConfig cfg = tiny_net(5, true);
  cfg.n_unrolls = 0;
  ParamStore store;
  NetParams params = init_net_params(store, cfg, rng);
  NetVars nv = bind_params(f.g, store, false);
  const auto z = admm_unrolled(f.g, f.model, f.y_full, cfg, params, nv);
  const auto x0 = adjoint_op(f.g, f.model, f.y_full);
  for (int j = 0; j < 5; ++j)
    for (std::int64_t i = 0; i < 64; ++i)
      REQUIRE(std::abs(f.g.val(z[j]).cx[i] - f.g.val(x0[j]).cx[i]) < 1e-12);
}

TEST_CASE("admm with near-identity denoiser matches cg_sense when fully sampled") {
  Rng rng(41);
  Fixture f(4, 3, 8, rng, false);
  NetConfig cfg = tiny_net(4, true);
  cfg.n_unrolls = 3;
  cfg.cg_iters = 8;
  ParamStore store;
  NetParams params = init_net_params(store, cfg, rng);
  // force the residual head to exact zero: denoiser becomes identity
  Param& fin = store.at(store.find("final_k"));
  for (auto& v : fin.value.re) v = 0.0;
  NetVars nv = bind_params(f.g, store, false);
  const auto z = admm_unrolled(f.g, f.model, f.y_full, cfg, params, nv);
  const auto xcg = cg_sense(f.g, f.model, f.y_full, 0.0, 20, 1e-12);
  for (int j = 0; j < 4; ++j) {
    double num = 0, den = 0;
    for (std::int64_t i = 0; i < 64; ++i) {
      num += std::norm(f.g.val(z[j]).cx[i] - f.g.val(xcg[j]).cx[i]);
      den += std::norm(f.g.val(xcg[j]).cx[i]);
    }
    REQUIRE(std::sqrt(num / den) < 1e-3);
  }
}

TEST_CASE("admm with identity denoiser approaches least squares as rho grows") {
  Rng rng(43);
  Fixture f(5, 3, 8, rng, false);
  NetConfig cfg = tiny_net(5, true);
  cfg.n_unrolls = 10;
  cfg.cg_iters = 10;
  cfg.rho_init = 10.0;
  ParamStore store;
  NetParams params = init_net_params(store, cfg, rng);
  Param& fin = store.at(store.find("final_k"));
  for (auto& v : fin.value.re) v = 0.0;
  NetVars nv = bind_params(f.g, store, false);
  const auto z = admm_unrolled(f.g, f.model, f.y_full, cfg, params, nv);
  const auto xcg = cg_sense(f.g, f.model, f.y_full, 0.0, 25, 1e-12);
  for (int j = 0; j < 5; ++j) {
    double num = 0, den = 0;
    for (std::int64_t i = 0; i < 64; ++i) {
      num += std::norm(f.g.val(z[j]).cx[i] - f.g.val(xcg[j]).cx[i]);
      den += std::norm(f.g.val(xcg[j]).cx[i]);
    }
    REQUIRE(std::sqrt(num / den) < 1e-2);
  }
}

TEST_CASE("end-to-end gradients: soft mask -> recon -> ssim") {
  // The binarization is non-differentiable by construction (its own
  // contract is checked in the diffkit suite); the smooth path uses the
  // probability map directly as the mask.
  Rng rng(47);
  const int nj = 4, nc = 2, n = 8;
  NetConfig cfg = tiny_net(nj, true);
  cfg.n_unrolls = 1;
  cfg.cg_iters = 2;

  std::vector<CGrid> raw;
  for (int c = 0; c < nc; ++c) {
    CGrid s({n, n});
    for (auto i = 0; i < 64; ++i) s[i] = Cplx(1 + 0.2 * rng.normal(), 0.2 * rng.normal());
    raw.push_back(std::move(s));
  }
  const auto coils = normalize_coils(raw);
  std::vector<CGrid> truth;
  for (int j = 0; j < nj; ++j) {
    CGrid t({n, n});
    for (auto i = 0; i < 64; ++i) t[i] = Cplx(rng.normal(), rng.normal());
    truth.push_back(std::move(t));
  }
  ParamStore store;
  Rng prng(53);
  NetParams params = init_net_params(store, cfg, prng);
  const int wid = store.add("w", "sampling_weights", Tensor::real({n, n}, 0.3));

  auto build = [&](Graph& g, const std::vector<Var>& pvars) {
    SliceModel model;
    model.ny = model.nz = n;
    for (const auto& c : coils) model.coils.push_back(g.constant(Tensor::from(c)));
    Var p = g.sigmoid(g.scale(pvars[wid], 0.25));
    for (int j = 0; j < nj; ++j) model.masks.push_back(p);
    std::vector<Var> x, yref;
    for (const auto& t : truth) x.push_back(g.constant(Tensor::from(t)));
    const auto y = forward_op(g, model, x);
    NetVars nv;
    nv.vars = pvars;
    const auto z = admm_unrolled(g, model, y, cfg, params, nv);
    std::vector<Var> zp, rp;
    for (int j = 0; j < nj; ++j) {
      zp.push_back(g.pack_ri(z[j]));
      rp.push_back(g.pack_ri(x[j]));
    }
    return g.ssim_channelwise(g.concat_ch(zp), g.concat_ch(rp));
  };

  Graph g;
  std::vector<Var> pvars;
  for (size_t i = 0; i < store.size(); ++i)
    pvars.push_back(g.leaf(store.at((int)i).value, true));
  Var loss = build(g, pvars);
  g.backward(loss);

  Rng coord_rng(59);
  // spot-check 5 coordinates across mask weights and two conv kernels
  for (const char* pname : {"w", "enc1_k", "fuse_echo_k"}) {
    const int pid = store.find(pname);
    const Tensor& x0 = store.at(pid).value;
    std::vector<std::int64_t> coords;
    for (int i = 0; i < 5; ++i)
      coords.push_back((std::int64_t)coord_rng.integer(x0.numel()));
    auto eval = [&](const Tensor& t) {
      Graph gg;
      std::vector<Var> pv;
      for (size_t i = 0; i < store.size(); ++i)
        pv.push_back(gg.leaf((int)i == pid ? t : store.at((int)i).value));
      return gg.val(build(gg, pv)).scalar_value();
    };
    const auto chk =
        testutil::fd_check_real(eval, x0, g.grad(pvars[pid]), coords, 1e-5);
    INFO("param ", pname);
    CHECK(chk.max_rel_err < 1e-3);
  }
}

TEST_CASE("blocks_to_contrasts assembles per-contrast data") {
  seqsim::SequenceParams seq;
  seq.te_mgre_ms = {2.9, 7.7, 12.5};
  seq.trs_per_segment = 16;
  const auto support = sampling::elliptical_support(16, 16);

  phantom::PhantomSpec spec;
  spec.dims = {16, 16, 16};
  spec.seed = 3;
  spec.classes = phantom::PhantomSpec::default_classes();
  const auto ph = phantom::make_phantom(spec);
  RGrid field(ph.labels.shape(), 0.0);
  const auto images = seqsim::simulate_contrasts(ph, seq, field);
  const auto coils = phantom::synthesize_coils({16, 16, 16}, 2, 1);
  const auto ks = seqsim::synthesize_kspace(images, coils, 0.0, 1);

  // full schedule: every contrast gets the whole assigned set
  std::int64_t n_sup = 0;
  for (std::int64_t i = 0; i < support.numel(); ++i)
    if (support[i]) n_sup++;
  const int reps = (int)(n_sup / seq.trs_per_segment);
  const auto masks =
      sampling::full_scan_masks(support, reps, seq.trs_per_segment, 6);
  const auto sched = sampling::schedule_undersampled(masks, reps, seq, support);
  const auto ck = blocks_to_contrasts(ks, sched);
  REQUIRE((int)ck.y.size() == 6);
  for (int j = 0; j < 6; ++j)
    for (std::int64_t i = 0; i < support.numel(); ++i)
      REQUIRE(ck.validity[j][i] == masks[j][i]);
  // round trip: masked k-space equals direct masking
  for (int j = 0; j < 6; ++j)
    for (int c = 0; c < 2; ++c)
      for (int x = 0; x < 16; ++x)
        for (int a = 0; a < 16; ++a)
          for (int b = 0; b < 16; ++b) {
            const Cplx want =
                masks[j].at2(a, b) ? ks.data[j][c].at3(x, a, b) : Cplx{};
            REQUIRE(std::abs(ck.y[j][c].at3(x, a, b) - want) < 1e-12);
          }

  // empty schedule: zero masks and zero data
  sampling::AcquisitionSchedule empty;
  empty.implied_masks.assign(6, MaskGrid({16, 16}, 0));
  const auto ck0 = blocks_to_contrasts(ks, empty);
  for (int j = 0; j < 6; ++j)
    for (const auto& coil : ck0.y[j])
      for (std::int64_t i = 0; i < coil.numel(); ++i)
        REQUIRE(std::abs(coil[i]) == 0.0);
}
