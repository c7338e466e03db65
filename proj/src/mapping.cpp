#include "mclaro/mapping.hpp"

#include <cmath>
#include <functional>
#include <thread>

#include "mclaro/fft.hpp"

namespace mclaro::mapping {
namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

void parallel_for(std::int64_t n, int threads,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (threads <= 1 || n < 1024) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::int64_t chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const std::int64_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

RGrid dipole_convolve(const RGrid& x, const RGrid& kernel) {
  CGrid c(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) c[i] = x[i];
  CGrid k = fft::fft3c(c);
  for (std::int64_t i = 0; i < k.numel(); ++i) k[i] *= kernel[i];
  CGrid f = fft::ifft3c(k);
  RGrid out(x.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = f[i].real();
  return out;
}

}  // namespace

std::optional<std::pair<double, double>> match_voxel(
    const std::array<double, 4>& signal, const seqsim::Dictionary& dict) {
  double norm = 0;
  for (double s : signal) norm += s * s;
  norm = std::sqrt(norm);
  if (!(norm > 1e-30)) return std::nullopt;
  const double s0 = signal[0] / norm, s1 = signal[1] / norm,
               s2 = signal[2] / norm, s3 = signal[3] / norm;
  const int n = dict.atoms.dim(0);
  const double* a = dict.atoms.data();
  int best = 0;
  double best_dot = -2.0;
  for (int i = 0; i < n; ++i) {
    const double d =
        a[4 * i] * s0 + a[4 * i + 1] * s1 + a[4 * i + 2] * s2 + a[4 * i + 3] * s3;
    if (d > best_dot) {
      best_dot = d;
      best = i;
    }
  }
  return std::make_pair(dict.t1_ms[best], dict.t2_ms[best]);
}

std::optional<double> fit_t2star_arlo(const std::vector<double>& y,
                                      double delta_te_ms) {
  const int n = (int)y.size();
  if (n < 3) throw std::invalid_argument("arlo: need at least 3 echoes");
  if (!(delta_te_ms > 0)) throw std::invalid_argument("arlo: bad echo spacing");
  double sd = 0, ss = 0, ymax = 0;
  for (double v : y) ymax = std::max(ymax, std::abs(v));
  for (int i = 0; i + 2 < n; ++i) {
    const double s = delta_te_ms / 3.0 * (y[i] + 4.0 * y[i + 1] + y[i + 2]);
    const double d = y[i] - y[i + 2];
    ss += s * d;
    sd += d * d;
  }
  if (!(sd > 1e-12 * ymax * ymax) || ymax == 0) return std::nullopt;
  const double t2s = ss / sd;
  if (!(t2s > 0)) return std::nullopt;
  return std::min(2000.0, std::max(1.0, t2s));
}

std::optional<FieldFit> fit_total_field(const std::vector<double>& phases,
                                        const std::vector<double>& mags,
                                        const std::vector<double>& te_ms) {
  const size_t n = phases.size();
  if (n < 2 || mags.size() != n || te_ms.size() != n)
    throw std::invalid_argument("fit_total_field: need matched series, n >= 2");
  double wsum = 0;
  for (double m : mags) wsum += m * m;
  if (!(wsum > 0)) return std::nullopt;

  // Temporal unwrap with a running field estimate; the first echo seeds it
  // (TE_1 is short enough to be wrap-free over the fields of interest).
  std::vector<double> ph(n);
  ph[0] = phases[0];
  double f_run = ph[0] / (kTwoPi * te_ms[0] / 1000.0);
  for (size_t j = 1; j < n; ++j) {
    const double dte = (te_ms[j] - te_ms[j - 1]) / 1000.0;
    const double predicted = ph[j - 1] + kTwoPi * f_run * dte;
    ph[j] = phases[j] + kTwoPi * std::round((predicted - phases[j]) / kTwoPi);
    // unweighted least-squares slope over echoes seen so far
    double st = 0, sp = 0, stt = 0, stp = 0;
    for (size_t i = 0; i <= j; ++i) {
      const double t = te_ms[i] / 1000.0;
      st += t;
      sp += ph[i];
      stt += t * t;
      stp += t * ph[i];
    }
    const double m = (double)(j + 1);
    const double den = m * stt - st * st;
    if (den > 0) f_run = (m * stp - st * sp) / den / kTwoPi;
  }

  // magnitude^2-weighted fit of ph = phi0 + 2 pi f t
  double sw = 0, swt = 0, swtt = 0, swp = 0, swtp = 0;
  for (size_t i = 0; i < n; ++i) {
    const double wgt = mags[i] * mags[i];
    const double t = te_ms[i] / 1000.0;
    sw += wgt;
    swt += wgt * t;
    swtt += wgt * t * t;
    swp += wgt * ph[i];
    swtp += wgt * t * ph[i];
  }
  const double den = sw * swtt - swt * swt;
  if (!(std::abs(den) > 1e-30)) return std::nullopt;
  FieldFit fit;
  const double slope = (sw * swtp - swt * swp) / den;
  fit.f_hz = slope / kTwoPi;
  fit.phi0_rad = (swp - slope * swt) / sw;
  return fit;
}

RGrid remove_background_pdf(const RGrid& field_hz, const MaskGrid& brain_mask,
                            const std::array<double, 3>& voxel_mm,
                            const std::array<double, 3>& b0_dir,
                            int cg_iters) {
  if (field_hz.shape() != brain_mask.shape())
    throw std::invalid_argument("pdf: field/mask dims differ");
  std::int64_t n_in = 0, n_out = 0;
  for (std::int64_t i = 0; i < brain_mask.numel(); ++i)
    (brain_mask[i] ? n_in : n_out)++;
  if (n_in == 0 || n_out == 0)
    throw std::invalid_argument("pdf: mask needs interior and exterior");

  const RGrid kernel = phantom::dipole_kernel(field_hz.shape(), voxel_mm, b0_dir);
  const std::int64_t n = field_hz.numel();

  // Normal equations for min || M (f - D E c) ||^2 over exterior sources c:
  // (E^T D M D E) c = E^T D M f, all operators FFT-diagonal or diagonal.
  auto apply_m = [&](RGrid& x) {
    for (std::int64_t i = 0; i < n; ++i)
      if (!brain_mask[i]) x[i] = 0;
  };
  auto apply_e = [&](RGrid& x) {
    for (std::int64_t i = 0; i < n; ++i)
      if (brain_mask[i]) x[i] = 0;
  };
  auto normal = [&](const RGrid& c) {
    RGrid t = c;
    apply_e(t);
    t = dipole_convolve(t, kernel);
    apply_m(t);
    t = dipole_convolve(t, kernel);
    apply_e(t);
    return t;
  };

  RGrid rhs = field_hz;
  apply_m(rhs);
  rhs = dipole_convolve(rhs, kernel);
  apply_e(rhs);

  RGrid x(field_hz.shape(), 0.0);
  RGrid r = rhs, p = rhs;
  double rs = 0;
  for (std::int64_t i = 0; i < n; ++i) rs += r[i] * r[i];
  for (int it = 0; it < cg_iters && rs > 1e-30; ++it) {
    RGrid q = normal(p);
    double pq = 0;
    for (std::int64_t i = 0; i < n; ++i) pq += p[i] * q[i];
    if (!(pq > 0)) break;
    const double alpha = rs / pq;
    double rs_new = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * q[i];
      rs_new += r[i] * r[i];
    }
    if (!std::isfinite(rs_new)) throw std::runtime_error("pdf: CG diverged");
    const double beta = rs_new / rs;
    for (std::int64_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    rs = rs_new;
  }

  apply_e(x);
  RGrid bg = dipole_convolve(x, kernel);
  RGrid local(field_hz.shape(), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    if (brain_mask[i]) local[i] = field_hz[i] - bg[i];
  return local;
}

RGrid dipole_invert_tkd(const RGrid& local_field_hz,
                        const MaskGrid& brain_mask,
                        const std::array<double, 3>& voxel_mm,
                        const std::array<double, 3>& b0_dir, double threshold,
                        double hz_per_ppm) {
  if (!(threshold > 0 && threshold <= 1.0 / 3.0))
    throw std::invalid_argument("tkd: threshold must be in (0, 1/3]");
  const RGrid kernel = phantom::dipole_kernel(local_field_hz.shape(), voxel_mm, b0_dir);
  CGrid c(local_field_hz.shape());
  for (std::int64_t i = 0; i < c.numel(); ++i) {
    if (!std::isfinite(local_field_hz[i]))
      throw std::invalid_argument("tkd: non-finite field");
    c[i] = local_field_hz[i];
  }
  CGrid k = fft::fft3c(c);
  const int hx = kernel.dim(0) / 2, hy = kernel.dim(1) / 2,
            hz = kernel.dim(2) / 2;
  for (int i = 0; i < kernel.dim(0); ++i)
    for (int j = 0; j < kernel.dim(1); ++j)
      for (int l = 0; l < kernel.dim(2); ++l) {
        const double d = kernel.at3(i, j, l);
        Cplx& v = k.vec()[((std::int64_t)i * kernel.dim(1) + j) * kernel.dim(2) + l];
        if (i == hx && j == hy && l == hz) {
          v = 0;  // chi(0) := 0
        } else if (std::abs(d) >= threshold) {
          v /= (hz_per_ppm * d);
        } else if (d == 0.0) {
          v = 0;
        } else {
          v *= (d > 0 ? 1.0 : -1.0) / (hz_per_ppm * threshold);
        }
      }
  CGrid chi_c = fft::ifft3c(k);
  RGrid chi(local_field_hz.shape(), 0.0);
  for (std::int64_t i = 0; i < chi.numel(); ++i)
    if (brain_mask[i]) chi[i] = chi_c[i].real();
  return chi;
}

QuantMaps derive_all_maps(const seqsim::ContrastImageSet& images,
                          const MaskGrid& brain_mask,
                          const std::array<double, 3>& voxel_mm,
                          const std::array<double, 3>& b0_dir,
                          const seqsim::SequenceParams& seq,
                          const seqsim::Dictionary& dict,
                          const MappingConfig& cfg) {
  const int ne = images.n_echoes;
  if (images.n_contrasts() != ne + 3)
    throw std::invalid_argument("derive_all_maps: bad contrast count");
  const auto& shape = images.images[0].shape();
  if (shape != brain_mask.shape())
    throw std::invalid_argument("derive_all_maps: mask dims differ");
  const std::int64_t n = brain_mask.numel();

  QuantMaps maps;
  maps.t1_ms = RGrid(shape, 0.0);
  maps.t2_ms = RGrid(shape, 0.0);
  maps.t2s_ms = RGrid(shape, 0.0);
  maps.chi_ppm = RGrid(shape, 0.0);
  maps.valid = MaskGrid(shape, 0);

  RGrid field(shape, 0.0);
  MaskGrid field_ok(shape, 0);
  const double dte = seq.delta_te_ms();

  parallel_for(n, cfg.threads, [&](std::int64_t lo, std::int64_t hi) {
    std::vector<double> mags(ne), phases(ne);
    for (std::int64_t v = lo; v < hi; ++v) {
      if (!brain_mask[v]) continue;
      for (int e = 0; e < ne; ++e) {
        const Cplx s = images.images[e][v];
        mags[e] = std::abs(s);
        phases[e] = std::arg(s);
      }
      bool ok = true;
      const auto t2s = fit_t2star_arlo(mags, dte);
      if (t2s)
        maps.t2s_ms[v] = *t2s;
      else
        ok = false;
      const auto ff = fit_total_field(phases, mags, seq.te_mgre_ms);
      if (ff) {
        field[v] = ff->f_hz;
        field_ok[v] = 1;
      } else {
        ok = false;
      }
      if (!ok) continue;

      // signed amplitudes: strip the field-induced phase, keep polarity
      auto amp = [&](const Cplx& s, double te) {
        const double a = kTwoPi * field[v] * te / 1000.0;
        return std::real(s * Cplx(std::cos(-a), std::sin(-a)));
      };
      const std::array<double, 4> sig = {
          amp(images.images[ne][v], seq.te_gre_ms),
          amp(images.images[0][v], seq.te_mgre_ms[0]),
          amp(images.images[ne + 1][v], seq.te_gre_ms),
          amp(images.images[ne + 2][v], seq.te_gre_ms)};
      const auto t1t2 = match_voxel(sig, dict);
      if (!t1t2) continue;
      maps.t1_ms[v] = t1t2->first;
      maps.t2_ms[v] = t1t2->second;
      maps.valid[v] = 1;
    }
  });

  // QSM stages are whole-volume 3-d operations
  for (std::int64_t v = 0; v < n; ++v)
    if (brain_mask[v] && !field_ok[v]) field[v] = 0;
  const RGrid local =
      remove_background_pdf(field, brain_mask, voxel_mm, b0_dir,
                            cfg.pdf_cg_iters);
  maps.chi_ppm = dipole_invert_tkd(local, brain_mask, voxel_mm, b0_dir,
                                   cfg.tkd_threshold, cfg.hz_per_ppm);
  return maps;
}

}  // namespace mclaro::mapping
