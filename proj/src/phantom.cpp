#include "mclaro/phantom.hpp"

#include <cmath>

#include "mclaro/fft.hpp"

namespace mclaro::phantom {
namespace {

struct Ellipsoid {
  double cx, cy, cz;  // center, normalized [-1,1] coords
  double ax, ay, az;  // semi-axes
  bool contains(double x, double y, double z) const {
    const double u = (x - cx) / ax, v = (y - cy) / ay, w = (z - cz) / az;
    return u * u + v * v + w * w <= 1.0;
  }
};

void validate_classes(const std::map<int, TissueClass>& classes) {
  if (classes.empty()) throw std::invalid_argument("phantom: empty class table");
  for (const auto& [label, c] : classes) {
    if (label == 0) throw std::invalid_argument("phantom: label 0 is reserved");
    if (!(c.t1_ms > 0 && c.t2_ms > 0 && c.t2s_ms > 0 && c.m0 > 0))
      throw std::invalid_argument("phantom: class " + c.name +
                                  " needs positive T1/T2/T2*/M0");
    if (!(c.t2s_ms <= c.t2_ms))
      throw std::invalid_argument("phantom: class " + c.name +
                                  " violates T2* <= T2");
    if (!(c.t1_ms > c.t2_ms))
      throw std::invalid_argument("phantom: class " + c.name +
                                  " violates T1 > T2");
    if (!std::isfinite(c.chi_ppm))
      throw std::invalid_argument("phantom: non-finite chi");
  }
}

}  // namespace

std::map<int, TissueClass> PhantomSpec::default_classes() {
  return {
      {1, {"WM", 855.0, 67.0, 50.0, 1.0, -0.03}},
      {2, {"GM", 1264.0, 89.0, 60.0, 1.0, 0.02}},
      {3, {"CSF", 4000.0, 2000.0, 500.0, 1.0, 0.0}},
      {4, {"DG_L", 1130.0, 80.0, 30.0, 1.0, 0.10}},
      {5, {"DG_R", 1130.0, 80.0, 30.0, 1.0, 0.10}},
  };
}

PhantomSpec PhantomSpec::brain_default(std::vector<int> dims,
                                       std::uint64_t seed) {
  PhantomSpec s;
  s.dims = std::move(dims);
  s.seed = seed;
  s.classes = default_classes();
  return s;
}

TissuePhantom make_phantom(const PhantomSpec& spec) {
  if (spec.dims.size() != 3)
    throw std::invalid_argument("phantom: dims must be 3-d");
  for (int d : spec.dims)
    if (d < 16) throw std::invalid_argument("phantom: dims must be >= 16");
  validate_classes(spec.classes);
  const double b0n = std::sqrt(spec.b0_dir[0] * spec.b0_dir[0] +
                               spec.b0_dir[1] * spec.b0_dir[1] +
                               spec.b0_dir[2] * spec.b0_dir[2]);
  if (std::abs(b0n - 1.0) > 1e-12)
    throw std::invalid_argument("phantom: B0_dir must be unit norm");

  TissuePhantom p;
  p.labels = LabelGrid(spec.dims, 0);
  p.brain_mask = MaskGrid(spec.dims, 0);
  p.classes = spec.classes;
  p.voxel_mm = spec.voxel_mm;
  p.b0_dir = spec.b0_dir;
  p.seed = spec.seed;

  const int nx = spec.dims[0], ny = spec.dims[1], nz = spec.dims[2];

  if (spec.geometry == Geometry::uniform) {
    const int label = spec.classes.begin()->first;
    p.labels.fill(label);
    p.brain_mask.fill(1);
    return p;
  }

  if (spec.classes.count(1) + spec.classes.count(2) + spec.classes.count(3) +
          spec.classes.count(4) + spec.classes.count(5) != 5)
    throw std::invalid_argument("phantom: brain geometry needs labels 1..5");

  // Seeded jitter keeps distinct phantoms geometrically distinct while the
  // same seed reproduces bit-identical volumes.
  Rng rng = Rng::derive(spec.seed, 0xf0);
  auto jit = [&](double scale) { return rng.uniform(-scale, scale); };

  const Ellipsoid brain{jit(0.03), jit(0.03), jit(0.03),
                        0.80 + jit(0.05), 0.84 + jit(0.05), 0.78 + jit(0.05)};
  // cortical ribbon: outer shell of the brain ellipsoid
  const double gm_inner = 0.80 + jit(0.02);
  const Ellipsoid vent_l{brain.cx + jit(0.02), brain.cy - 0.16 + jit(0.02),
                         brain.cz + 0.05 + jit(0.02), 0.30, 0.09, 0.20};
  const Ellipsoid vent_r{brain.cx + jit(0.02), brain.cy + 0.16 + jit(0.02),
                         brain.cz + 0.05 + jit(0.02), 0.30, 0.09, 0.20};
  // deep-gray blobs: compact, mildly prolate along B0 like the deep nuclei
  const double dg_r = 0.13 + jit(0.015);
  const double dg_rz = 1.7 * dg_r;
  const Ellipsoid dg_l{brain.cx + jit(0.03), brain.cy - 0.34 + jit(0.02),
                       brain.cz - 0.12 + jit(0.02), dg_r, dg_r, dg_rz};
  const Ellipsoid dg_rr{brain.cx + jit(0.03), brain.cy + 0.34 + jit(0.02),
                        brain.cz - 0.12 + jit(0.02), dg_r, dg_r, dg_rz};

  for (int i = 0; i < nx; ++i) {
    const double x = 2.0 * (i + 0.5) / nx - 1.0;
    for (int j = 0; j < ny; ++j) {
      const double y = 2.0 * (j + 0.5) / ny - 1.0;
      for (int k = 0; k < nz; ++k) {
        const double z = 2.0 * (k + 0.5) / nz - 1.0;
        if (!brain.contains(x, y, z)) continue;
        int label = 1;  // WM fill
        const double u = (x - brain.cx) / brain.ax;
        const double v = (y - brain.cy) / brain.ay;
        const double w = (z - brain.cz) / brain.az;
        const double rho = std::sqrt(u * u + v * v + w * w);
        if (rho > gm_inner) label = 2;
        if (vent_l.contains(x, y, z) || vent_r.contains(x, y, z)) label = 3;
        if (dg_l.contains(x, y, z)) label = 4;
        if (dg_rr.contains(x, y, z)) label = 5;
        p.labels.at3(i, j, k) = label;
        p.brain_mask.at3(i, j, k) = 1;
      }
    }
  }
  return p;
}

RGrid TissuePhantom::class_map(double TissueClass::*field) const {
  RGrid out(labels.shape(), 0.0);
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    const int l = labels[i];
    if (l != 0) out[i] = classes.at(l).*field;
  }
  return out;
}

CoilSet synthesize_coils(const std::vector<int>& dims, int n_coils,
                         std::uint64_t seed, bool flat) {
  if (n_coils < 1) throw std::invalid_argument("coils: n_coils must be >= 1");
  if (dims.size() != 3) throw std::invalid_argument("coils: dims must be 3-d");
  CoilSet cs;
  cs.n_coils = n_coils;
  const int nx = dims[0], ny = dims[1], nz = dims[2];

  if (flat) {
    for (int c = 0; c < n_coils; ++c) cs.sens.emplace_back(dims, Cplx(1.0, 0.0));
    return cs;
  }

  Rng rng = Rng::derive(seed, 0xc0);
  for (int c = 0; c < n_coils; ++c) {
    // Gaussian lobe centered on a ring just outside the FOV, with a smooth
    // low-order random phase. RSS stays strictly positive everywhere.
    const double ang = 2.0 * M_PI * (c + rng.uniform(-0.1, 0.1)) / n_coils;
    const double ring = 1.15;
    const double cy = ring * std::cos(ang), cz = ring * std::sin(ang);
    const double sigma = 0.9 + rng.uniform(-0.05, 0.05);
    const double p0 = rng.uniform(-M_PI, M_PI);
    const double p1 = rng.uniform(-0.8, 0.8), p2 = rng.uniform(-0.8, 0.8);
    const double p3 = rng.uniform(-0.4, 0.4);
    CGrid s(dims);
    for (int i = 0; i < nx; ++i) {
      for (int j = 0; j < ny; ++j) {
        const double y = 2.0 * (j + 0.5) / ny - 1.0;
        for (int k = 0; k < nz; ++k) {
          const double z = 2.0 * (k + 0.5) / nz - 1.0;
          const double d2 = (y - cy) * (y - cy) + (z - cz) * (z - cz);
          const double mag = std::exp(-d2 / (2.0 * sigma * sigma));
          const double ph = p0 + p1 * y + p2 * z + p3 * y * z;
          s.at3(i, j, k) = Cplx(mag * std::cos(ph), mag * std::sin(ph));
        }
      }
    }
    cs.sens.push_back(std::move(s));
  }
  return cs;
}

RGrid dipole_kernel(const std::vector<int>& dims,
                    const std::array<double, 3>& voxel_mm,
                    const std::array<double, 3>& b0_dir) {
  if (dims.size() != 3) throw std::invalid_argument("dipole: dims must be 3-d");
  RGrid d(dims, 0.0);
  const int nx = dims[0], ny = dims[1], nz = dims[2];
  const int hx = nx / 2, hy = ny / 2, hz = nz / 2;
  for (int i = 0; i < nx; ++i) {
    const double kx = (i - hx) / (nx * voxel_mm[0]);
    for (int j = 0; j < ny; ++j) {
      const double ky = (j - hy) / (ny * voxel_mm[1]);
      for (int k = 0; k < nz; ++k) {
        const double kz = (k - hz) / (nz * voxel_mm[2]);
        const double k2 = kx * kx + ky * ky + kz * kz;
        if (k2 == 0.0) continue;  // D(0) := 0
        const double kb = kx * b0_dir[0] + ky * b0_dir[1] + kz * b0_dir[2];
        d.at3(i, j, k) = 1.0 / 3.0 - kb * kb / k2;
      }
    }
  }
  return d;
}

RGrid susceptibility_to_field(const RGrid& chi_ppm,
                              const std::array<double, 3>& voxel_mm,
                              const std::array<double, 3>& b0_dir,
                              double hz_per_ppm) {
  for (std::int64_t i = 0; i < chi_ppm.numel(); ++i)
    if (!std::isfinite(chi_ppm[i]))
      throw std::invalid_argument("susceptibility_to_field: non-finite chi");
  const RGrid d = dipole_kernel(chi_ppm.shape(), voxel_mm, b0_dir);
  CGrid x(chi_ppm.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = chi_ppm[i];
  CGrid k = fft::fft3c(x);
  for (std::int64_t i = 0; i < k.numel(); ++i) k[i] *= d[i];
  CGrid f = fft::ifft3c(k);
  RGrid out(chi_ppm.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = hz_per_ppm * f[i].real();
  return out;
}

}  // namespace mclaro::phantom
