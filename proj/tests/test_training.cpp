#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mclaro/fft.hpp"
#include "mclaro/metrics.hpp"
#include "mclaro/training.hpp"

using namespace mclaro;
using namespace mclaro::training;

namespace {

// tiny synthetic dataset: smooth random "anatomy" with phase structure
Dataset tiny_dataset(int n_train, int n_val, int n, int nj, int nc,
                     std::uint64_t seed) {
  Dataset d;
  d.ny = d.nz = n;
  d.n_contrasts = nj;
  d.n_echoes = nj - 3;
  auto make = [&](int idx) {
    Sample s;
    Rng rng = Rng::derive(seed, idx);
    std::vector<CGrid> raw;
    for (int c = 0; c < nc; ++c) {
      CGrid coil({n, n});
      for (int y = 0; y < n; ++y)
        for (int z = 0; z < n; ++z)
          coil.at2(y, z) = Cplx(1.0 + 0.4 * std::sin(0.31 * y + 1.7 * c),
                                0.3 * std::cos(0.27 * z - c));
      raw.push_back(std::move(coil));
    }
    s.coils = recon::normalize_coils(raw);
    const double cy = n / 2.0 + rng.uniform(-3, 3);
    const double cz = n / 2.0 + rng.uniform(-3, 3);
    for (int j = 0; j < nj; ++j) {
      CGrid t({n, n});
      const double w = 0.5 + 0.5 * j;
      for (int y = 0; y < n; ++y)
        for (int z = 0; z < n; ++z) {
          const double r2 = (y - cy) * (y - cy) + (z - cz) * (z - cz);
          const double mag = std::exp(-r2 / (0.08 * n * n)) * (1.0 + 0.1 * w);
          const double ph = 0.02 * w * (y - cy);
          t.at2(y, z) = Cplx(mag * std::cos(ph), mag * std::sin(ph));
        }
      s.target.push_back(std::move(t));
    }
    s.y.resize(nj);
    for (int j = 0; j < nj; ++j)
      for (int c = 0; c < nc; ++c) {
        CGrid y({n, n});
        for (int yy = 0; yy < n; ++yy)
          for (int z = 0; z < n; ++z)
            y.at2(yy, z) = s.coils[c].at2(yy, z) * s.target[j].at2(yy, z);
        fft::fft2c_inplace(y);
        s.y[j].push_back(std::move(y));
      }
    return s;
  };
  for (int i = 0; i < n_train; ++i) d.train.push_back(make(i));
  for (int i = 0; i < n_val; ++i) d.val.push_back(make(100 + i));
  return d;
}

TrainConfig tiny_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.r = 4;
  cfg.epochs_phase1 = 2;
  cfg.epochs_phase2 = 1;
  cfg.seed = seed;
  cfg.calib_block = 4;
  cfg.net.n_unrolls = 1;
  cfg.net.cg_iters = 2;
  cfg.net.n_features = 3;
  cfg.net.width1 = 4;
  cfg.net.width2 = 6;
  return cfg;
}

}  // namespace

TEST_CASE("phase 1 learns: epoch loss drops, ratio invariant holds") {
  const auto data = tiny_dataset(8, 2, 16, 5, 2, 1);
  const auto support = sampling::elliptical_support(16, 16);
  const auto cfg = tiny_config(7);
  const auto ckpt = train_phase1(data, support, cfg);

  // epoch means from the history summary rows
  std::vector<double> epoch_loss;
  for (const auto& row : ckpt.history)
    if (row.step == -1) epoch_loss.push_back(row.loss);
  REQUIRE(epoch_loss.size() == 2);
  CHECK(epoch_loss.back() < epoch_loss.front());

  // loss is bounded by the SSIM range
  for (const auto& row : ckpt.history) {
    REQUIRE(row.loss >= 0.0);
    REQUIRE(row.loss <= 2.0);
  }

  // final probability maps hit the target mean over the support
  std::int64_t n_sup = 0;
  for (std::int64_t i = 0; i < support.numel(); ++i)
    if (support[i]) n_sup++;
  for (const auto& p : ckpt.prob_maps) {
    double mean = 0;
    for (std::int64_t i = 0; i < p.numel(); ++i) mean += p[i];
    CHECK(std::abs(mean / n_sup - 0.25) < 1e-6);
  }
}

TEST_CASE("mask_opt=false freezes the sampling weights bit-exactly") {
  const auto data = tiny_dataset(4, 1, 16, 5, 2, 2);
  const auto support = sampling::elliptical_support(16, 16);
  auto cfg = tiny_config(3);
  cfg.mask_opt = false;
  cfg.epochs_phase1 = 1;
  const auto ckpt = train_phase1(data, support, cfg);

  // frozen weights equal the multi-level baseline logits
  const RGrid density = sampling::baseline_vd_density(16, 16, 0.25, cfg.vd_levels);
  const int wid = ckpt.params.find("sample_w_0");
  REQUIRE(wid >= 0);
  for (std::int64_t i = 0; i < density.numel(); ++i) {
    const double p = std::min(1.0 - sampling::kProbEps,
                              std::max(sampling::kProbEps, density[i]));
    const double logit = std::log(p / (1.0 - p)) / cfg.slope_a;
    REQUIRE(ckpt.params.at(wid).value.re[i] == logit);
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto data = tiny_dataset(3, 1, 16, 5, 2, 4);
  const auto support = sampling::elliptical_support(16, 16);
  auto cfg = tiny_config(11);
  cfg.epochs_phase1 = 1;
  const auto a = train_phase1(data, support, cfg);
  const auto b = train_phase1(data, support, cfg);
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i)
    REQUIRE(a.history[i].loss == b.history[i].loss);
  for (size_t p = 0; p < a.params.size(); ++p)
    for (std::int64_t i = 0; i < a.params.at((int)p).value.numel(); ++i)
      REQUIRE(a.params.at((int)p).value.re[i] ==
              b.params.at((int)p).value.re[i]);
}

TEST_CASE("phase 2: frozen masks, ratio guard, no material regression") {
  const auto data = tiny_dataset(8, 2, 16, 5, 2, 5);
  const auto support = sampling::elliptical_support(16, 16);
  auto cfg = tiny_config(13);
  cfg.epochs_phase1 = 2;
  cfg.epochs_phase2 = 2;
  cfg.calib_block = 0;  // plain draws for the ratio check
  cfg.phase2_ratio_tol = 0.02;
  const auto p1 = train_phase1(data, support, cfg);
  const auto p2 = train_phase2(data, support, cfg, p1);

  REQUIRE(p2.phase == 2);
  REQUIRE((int)p2.fixed_masks.size() == data.n_contrasts);
  std::int64_t n_sup = 0;
  for (std::int64_t i = 0; i < support.numel(); ++i)
    if (support[i]) n_sup++;
  for (const auto& m : p2.fixed_masks) {
    std::int64_t c = 0;
    for (std::int64_t i = 0; i < m.numel(); ++i)
      if (m[i] && support[i]) c++;
    CHECK(std::abs((double)c / n_sup - 1.0 / cfg.r) <= cfg.phase2_ratio_tol);
  }

  // sampling weights untouched during phase 2
  const int wid = p1.params.find("sample_w_1");
  for (std::int64_t i = 0; i < p1.params.at(wid).value.numel(); ++i)
    REQUIRE(p2.params.at(wid).value.re[i] == p1.params.at(wid).value.re[i]);

  // fine-tuning does not materially regress the validation loss
  double v1 = 0, v2 = 0;
  for (const auto& row : p1.history)
    if (row.step == -1) v1 = row.val_loss;
  for (const auto& row : p2.history)
    if (row.step == -1) v2 = row.val_loss;
  CHECK(v2 <= v1 + 1e-3);

  CHECK_THROWS_AS(train_phase2(data, support, cfg, p2), std::invalid_argument);
}

TEST_CASE("checkpoints round trip through disk") {
  const auto data = tiny_dataset(2, 1, 16, 5, 2, 6);
  const auto support = sampling::elliptical_support(16, 16);
  auto cfg = tiny_config(17);
  cfg.epochs_phase1 = 1;
  cfg.epochs_phase2 = 1;
  const auto p1 = train_phase1(data, support, cfg);
  const auto p2 = train_phase2(data, support, cfg, p1);
  p2.save("/tmp/mclaro_test_ckpt");
  const auto loaded = Checkpoint::load("/tmp/mclaro_test_ckpt");
  REQUIRE(loaded.phase == 2);
  REQUIRE(loaded.fixed_masks.size() == p2.fixed_masks.size());
  for (size_t j = 0; j < p2.fixed_masks.size(); ++j)
    for (std::int64_t i = 0; i < p2.fixed_masks[j].numel(); ++i)
      REQUIRE(loaded.fixed_masks[j][i] == p2.fixed_masks[j][i]);
  for (size_t p = 0; p < p2.params.size(); ++p)
    for (std::int64_t i = 0; i < p2.params.at((int)p).value.numel(); ++i)
      REQUIRE(loaded.params.at((int)p).value.re[i] ==
              p2.params.at((int)p).value.re[i]);

  // reconstruction with the loaded checkpoint is usable
  const auto rec = reconstruct_slice(data.train[0], loaded.fixed_masks, cfg,
                                     loaded);
  REQUIRE((int)rec.size() == data.n_contrasts);
  for (const auto& img : rec)
    for (std::int64_t i = 0; i < img.numel(); ++i)
      REQUIRE(std::isfinite(img[i].real()));
}

TEST_CASE("run_ablation produces all four variants with metrics") {
  const auto data = tiny_dataset(4, 1, 16, 5, 2, 8);
  const auto support = sampling::elliptical_support(16, 16);
  auto cfg = tiny_config(19);
  cfg.epochs_phase1 = 1;
  cfg.epochs_phase2 = 1;
  const auto variants =
      run_ablation(data, support, cfg, {"00", "01", "10", "11"});
  REQUIRE(variants.size() == 4);
  for (const auto& v : variants) {
    REQUIRE(v.checkpoint.phase == 2);
    REQUIRE((int)v.checkpoint.fixed_masks.size() == data.n_contrasts);
  }
  bool f, m;
  CHECK(parse_ablation_flags("10", f, m));
  CHECK(f);
  CHECK_FALSE(m);
  CHECK_FALSE(parse_ablation_flags("2x", f, m));
}
