#include "mclaro/seqsim.hpp"

#include <cmath>
#include <map>

#include "mclaro/fft.hpp"

namespace mclaro::seqsim {
namespace {

// Affine map m -> a*m + b of longitudinal magnetization over one step.
struct Affine {
  double a = 1.0, b = 0.0;
  // this after g
  Affine after(const Affine& g) const { return {a * g.a, a * g.b + b}; }
  double operator()(double m) const { return a * m + b; }
};

Affine relax(double dt_ms, double t1_ms, double m0) {
  const double e1 = std::exp(-dt_ms / t1_ms);
  return {e1, m0 * (1.0 - e1)};
}

// n spoiled GRE repetitions: m -> cos(a)*m then T1 relaxation over TR.
Affine gre_block(int n, double tr_ms, double flip_rad, double t1_ms,
                 double m0) {
  const double e1 = std::exp(-tr_ms / t1_ms);
  const double f = std::cos(flip_rad) * e1;
  // geometric sum of per-TR recovery terms
  const double fn = std::pow(f, n);
  const double gsum = (std::abs(1.0 - f) < 1e-15) ? n : (1.0 - fn) / (1.0 - f);
  return {fn, m0 * (1.0 - e1) * gsum};
}

// Mz just before the k-th excitation of a block (k 0-based).
double mz_at_tr(double mz_start, int k, double tr_ms, double flip_rad,
                double t1_ms, double m0) {
  return gre_block(k, tr_ms, flip_rad, t1_ms, m0)(mz_start);
}

}  // namespace

double SequenceParams::delta_te_ms() const {
  double sum = 0;
  for (size_t i = 1; i < te_mgre_ms.size(); ++i)
    sum += te_mgre_ms[i] - te_mgre_ms[i - 1];
  return sum / (double)(te_mgre_ms.size() - 1);
}

void SequenceParams::validate() const {
  if (!(flip_deg > 0.0 && flip_deg < 90.0))
    throw std::invalid_argument("seq: flip angle must be in (0, 90) deg");
  if (!(tr_gre_ms > 0 && tr_mgre_ms > 0 && te_gre_ms > 0 && t2prep_te_ms > 0))
    throw std::invalid_argument("seq: times must be positive");
  if (trs_per_segment < 1)
    throw std::invalid_argument("seq: trs_per_segment must be >= 1");
  if (n_echoes() < 3)
    throw std::invalid_argument("seq: need at least 3 echoes");
  for (double d : td_ms)
    if (d < 0) throw std::invalid_argument("seq: delays must be >= 0");
  const double dte = delta_te_ms();
  for (size_t i = 1; i < te_mgre_ms.size(); ++i) {
    const double s = te_mgre_ms[i] - te_mgre_ms[i - 1];
    if (s <= 0)
      throw std::invalid_argument("seq: echo times must be increasing");
    if (std::abs(s - dte) > 0.03 * dte)
      throw std::invalid_argument("seq: echo spacing must be constant (3%)");
  }
  if (!(inversion_efficiency > 0 && inversion_efficiency <= 1.0))
    throw std::invalid_argument("seq: inversion efficiency in (0, 1]");
}

int center_tr_index(Block b, int n_trs) {
  switch (b) {
    case Block::ir1:
    case Block::ir2: return n_trs / 2;   // in-and-out
    case Block::mgre: return n_trs - 1;  // reverse-centric
    case Block::t2prep: return 0;        // centric
  }
  return 0;
}

MzTimeline steady_state_mz(const Tissue& tissue, const SequenceParams& seq) {
  seq.validate();
  if (!(tissue.t1_ms > 0 && tissue.t2_ms > 0 && tissue.m0 > 0))
    throw std::invalid_argument("steady_state_mz: invalid tissue");

  const double flip = seq.flip_deg * M_PI / 180.0;
  const int n = seq.trs_per_segment;
  const double t1 = tissue.t1_ms, m0 = tissue.m0;

  const Affine inv{-seq.inversion_efficiency, 0.0};
  const Affine t2p{std::exp(-seq.t2prep_te_ms / tissue.t2_ms), 0.0};
  const std::array<Affine, kNumBlocks> blocks = {
      gre_block(n, seq.tr_gre_ms, flip, t1, m0),
      gre_block(n, seq.tr_mgre_ms, flip, t1, m0),
      gre_block(n, seq.tr_gre_ms, flip, t1, m0),
      gre_block(n, seq.tr_gre_ms, flip, t1, m0)};

  // One full repetition starting just before the inversion pulse.
  Affine cycle = inv;
  cycle = relax(seq.td_ms[0], t1, m0).after(cycle);
  cycle = blocks[0].after(cycle);
  cycle = relax(seq.td_ms[1], t1, m0).after(cycle);
  cycle = blocks[1].after(cycle);
  cycle = relax(seq.td_ms[2], t1, m0).after(cycle);
  cycle = blocks[2].after(cycle);
  cycle = relax(seq.td_ms[3], t1, m0).after(cycle);
  cycle = t2p.after(cycle);
  cycle = blocks[3].after(cycle);

  if (std::abs(cycle.a) >= 1.0)
    throw std::runtime_error("steady_state_mz: repetition map not contracting");
  const double mz_star = cycle.b / (1.0 - cycle.a);

  MzTimeline tl;
  const std::array<double, kNumBlocks> tr = {seq.tr_gre_ms, seq.tr_mgre_ms,
                                             seq.tr_gre_ms, seq.tr_gre_ms};
  double mz = inv(mz_star);
  for (int b = 0; b < kNumBlocks; ++b) {
    mz = relax(seq.td_ms[b], t1, m0)(mz);
    if (b == (int)Block::t2prep) mz = t2p(mz);
    tl.mz_block_start[b] = mz;
    const int kc = center_tr_index((Block)b, n);
    tl.signal_at_center[b] =
        mz_at_tr(mz, kc, tr[b], flip, t1, m0) * std::sin(flip);
    mz = blocks[b](mz);
  }
  return tl;
}

double repetition_duration_s(const SequenceParams& seq) {
  seq.validate();
  const double n = seq.trs_per_segment;
  double ms = 3.0 * n * seq.tr_gre_ms + n * seq.tr_mgre_ms;
  for (double d : seq.td_ms) ms += d;
  return ms / 1000.0;
}

std::array<double, 4> block_signature(const Tissue& tissue,
                                      const SequenceParams& seq) {
  const MzTimeline tl = steady_state_mz(tissue, seq);
  return {tl.signal_at_center[0], tl.signal_at_center[1],
          tl.signal_at_center[2], tl.signal_at_center[3]};
}

std::vector<double> default_t1_grid() {
  std::vector<double> g;
  for (int t = 100; t <= 2000; t += 10) g.push_back(t);
  return g;
}

std::vector<double> default_t2_grid() {
  std::vector<double> g;
  for (int t = 10; t <= 200; t += 1) g.push_back(t);
  return g;
}

Dictionary build_dictionary(const SequenceParams& seq,
                            const std::vector<double>& t1_grid,
                            const std::vector<double>& t2_grid) {
  if (t1_grid.empty() || t2_grid.empty())
    throw std::invalid_argument("dictionary: empty grid");
  for (size_t i = 1; i < t1_grid.size(); ++i)
    if (t1_grid[i] <= t1_grid[i - 1])
      throw std::invalid_argument("dictionary: t1 grid must ascend");
  for (size_t i = 1; i < t2_grid.size(); ++i)
    if (t2_grid[i] <= t2_grid[i - 1])
      throw std::invalid_argument("dictionary: t2 grid must ascend");

  std::vector<std::pair<double, double>> pairs;
  for (double t1 : t1_grid)
    for (double t2 : t2_grid)
      if (t2 < t1) pairs.emplace_back(t1, t2);
  if (pairs.empty())
    throw std::invalid_argument("dictionary: no pairs with T2 < T1");

  Dictionary d;
  d.t1_grid = t1_grid;
  d.t2_grid = t2_grid;
  d.atoms = RGrid({(int)pairs.size(), 4});
  d.t1_ms.resize(pairs.size());
  d.t2_ms.resize(pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto sig =
        block_signature({pairs[i].first, pairs[i].second, 1.0}, seq);
    double norm = 0;
    for (double s : sig) norm += s * s;
    norm = std::sqrt(norm);
    if (norm <= 0)
      throw std::runtime_error("dictionary: zero-norm atom");
    for (int k = 0; k < 4; ++k) d.atoms.at2((int)i, k) = sig[k] / norm;
    d.t1_ms[i] = pairs[i].first;
    d.t2_ms[i] = pairs[i].second;
  }
  return d;
}

ContrastImageSet simulate_contrasts(const phantom::TissuePhantom& ph,
                                    const SequenceParams& seq,
                                    const RGrid& field_hz) {
  seq.validate();
  if (!(field_hz.shape() == ph.labels.shape()))
    throw std::invalid_argument("simulate_contrasts: field/phantom dims differ");

  // Per-class steady state; the phantom has few classes.
  std::map<int, MzTimeline> timelines;
  for (const auto& [label, c] : ph.classes)
    timelines[label] = steady_state_mz({c.t1_ms, c.t2_ms, c.m0}, seq);

  const int ne = seq.n_echoes();
  ContrastImageSet set;
  set.n_echoes = ne;
  set.images.assign(seq.n_contrasts(), CGrid(ph.labels.shape()));

  const double twopi = 2.0 * M_PI;
  for (std::int64_t v = 0; v < ph.labels.numel(); ++v) {
    const int label = ph.labels[v];
    if (label == 0) continue;
    const auto& tl = timelines.at(label);
    const double t2s = ph.classes.at(label).t2s_ms;
    const double f = field_hz[v];
    auto sample = [&](double amp, double te_ms) {
      const double mag = amp * std::exp(-te_ms / t2s);
      const double ph_rad = twopi * f * te_ms / 1000.0;
      return Cplx(mag * std::cos(ph_rad), mag * std::sin(ph_rad));
    };
    for (int e = 0; e < ne; ++e)
      set.images[e][v] =
          sample(tl.signal_at_center[(int)Block::mgre], seq.te_mgre_ms[e]);
    set.images[ne][v] =
        sample(tl.signal_at_center[(int)Block::ir1], seq.te_gre_ms);
    set.images[ne + 1][v] =
        sample(tl.signal_at_center[(int)Block::ir2], seq.te_gre_ms);
    set.images[ne + 2][v] =
        sample(tl.signal_at_center[(int)Block::t2prep], seq.te_gre_ms);
  }
  return set;
}

KSpaceSet synthesize_kspace(const ContrastImageSet& images,
                            const phantom::CoilSet& coils, double noise_sigma,
                            std::uint64_t seed) {
  if (noise_sigma < 0)
    throw std::invalid_argument("synthesize_kspace: negative noise sigma");
  if (coils.sens.empty() ||
      !(coils.sens[0].shape() == images.images.at(0).shape()))
    throw std::invalid_argument("synthesize_kspace: coil/image dims differ");

  const auto& shape = images.images[0].shape();
  const int nx = shape[0], ny = shape[1], nz = shape[2];
  KSpaceSet out;
  out.data.resize(images.n_contrasts());
  for (int j = 0; j < images.n_contrasts(); ++j) {
    out.data[j].reserve(coils.n_coils);
    for (int c = 0; c < coils.n_coils; ++c) {
      CGrid y(shape);
      CGrid slab({ny, nz});
      for (int i = 0; i < nx; ++i) {
        for (int jj = 0; jj < ny; ++jj)
          for (int k = 0; k < nz; ++k)
            slab.at2(jj, k) =
                coils.sens[c].at3(i, jj, k) * images.images[j].at3(i, jj, k);
        fft::fft2c_inplace(slab);
        for (int jj = 0; jj < ny; ++jj)
          for (int k = 0; k < nz; ++k) y.at3(i, jj, k) = slab.at2(jj, k);
      }
      out.data[j].push_back(std::move(y));
    }
  }
  if (noise_sigma > 0) {
    for (int j = 0; j < images.n_contrasts(); ++j)
      for (int c = 0; c < coils.n_coils; ++c) {
        Rng rng = Rng::derive(seed, 0x5a00 + (std::uint64_t)j * 64 + c);
        CGrid& y = out.data[j][c];
        for (std::int64_t v = 0; v < y.numel(); ++v)
          y[v] += Cplx(noise_sigma * rng.normal(), noise_sigma * rng.normal());
      }
  }
  return out;
}

}  // namespace mclaro::seqsim
