#include "mclaro/sampling.hpp"

#include <algorithm>
#include <cmath>

namespace mclaro::sampling {
namespace {

double center_y(int n) { return (n - 1) / 2.0; }

struct PolarCell {
  Cell c;
  double angle, radius;
  std::int64_t raster;
};

std::vector<PolarCell> to_polar(const std::vector<Cell>& cells, int n_ky,
                                int n_kz) {
  const double cy = center_y(n_ky), cz = center_y(n_kz);
  std::vector<PolarCell> out;
  out.reserve(cells.size());
  for (const Cell& c : cells) {
    const double dy = c.ky - cy, dz = c.kz - cz;
    out.push_back({c, std::atan2(dz, dy), std::hypot(dy, dz),
                   (std::int64_t)c.ky * n_kz + c.kz});
  }
  return out;
}

}  // namespace

MaskGrid elliptical_support(int n_ky, int n_kz) {
  if (n_ky < 8 || n_kz < 8)
    throw std::invalid_argument("elliptical_support: dims must be >= 8");
  MaskGrid m({n_ky, n_kz}, 0);
  const double cy = center_y(n_ky), cz = center_y(n_kz);
  const double ay = n_ky / 2.0, az = n_kz / 2.0;
  for (int i = 0; i < n_ky; ++i)
    for (int j = 0; j < n_kz; ++j) {
      const double u = (i - cy) / ay, v = (j - cz) / az;
      if (u * u + v * v <= 1.0) m.at2(i, j) = 1;
    }
  return m;
}

SegmentAssignment fanbeam_on_cells(std::vector<Cell> cells, int n_ky, int n_kz,
                                   int n_segments, int trs_per_segment,
                                   PadMode pad) {
  if (n_segments < 1 || trs_per_segment < 1)
    throw std::invalid_argument("fanbeam: segment counts must be positive");
  const std::int64_t demand = (std::int64_t)n_segments * trs_per_segment;
  if (pad == PadMode::error && (std::int64_t)cells.size() < demand)
    throw std::invalid_argument("fanbeam: insufficient supported locations");
  if (cells.empty())
    throw std::invalid_argument("fanbeam: no locations to assign");

  std::vector<PolarCell> pc = to_polar(cells, n_ky, n_kz);
  // lexicographic (angle, radius, raster) keeps the assignment deterministic
  std::sort(pc.begin(), pc.end(), [](const PolarCell& a, const PolarCell& b) {
    if (a.angle != b.angle) return a.angle < b.angle;
    if (a.radius != b.radius) return a.radius < b.radius;
    return a.raster < b.raster;
  });

  SegmentAssignment out;
  out.n_ky = n_ky;
  out.n_kz = n_kz;
  out.trs_per_segment = trs_per_segment;
  out.segments.resize(n_segments);
  const std::int64_t n = (std::int64_t)pc.size();
  for (int s = 0; s < n_segments; ++s) {
    const std::int64_t lo = n * s / n_segments;
    const std::int64_t hi = n * (s + 1) / n_segments;
    std::vector<PolarCell> fan(pc.begin() + lo, pc.begin() + hi);
    std::sort(fan.begin(), fan.end(),
              [](const PolarCell& a, const PolarCell& b) {
                if (a.radius != b.radius) return a.radius < b.radius;
                if (a.angle != b.angle) return a.angle < b.angle;
                return a.raster < b.raster;
              });
    auto& seg = out.segments[s];
    seg.reserve(trs_per_segment);
    if ((std::int64_t)fan.size() >= trs_per_segment) {
      for (int r = 0; r < trs_per_segment; ++r) seg.push_back(fan[r].c);
    } else {
      if (pad == PadMode::error || fan.empty())
        throw std::invalid_argument("fanbeam: insufficient supported locations");
      for (int r = 0; r < trs_per_segment; ++r)
        seg.push_back(fan[r % fan.size()].c);
    }
  }
  return out;
}

SegmentAssignment fanbeam_segments(const MaskGrid& support, int n_segments,
                                   int trs_per_segment, PadMode pad) {
  std::vector<Cell> cells;
  for (int i = 0; i < support.dim(0); ++i)
    for (int j = 0; j < support.dim(1); ++j)
      if (support.at2(i, j)) cells.push_back({i, j});
  return fanbeam_on_cells(std::move(cells), support.dim(0), support.dim(1),
                          n_segments, trs_per_segment, pad);
}

MaskGrid SegmentAssignment::cell_mask() const {
  MaskGrid m({n_ky, n_kz}, 0);
  for (const auto& seg : segments)
    for (const Cell& c : seg) m.at2(c.ky, c.kz) = 1;
  return m;
}

Strategy block_strategy(seqsim::Block b) {
  switch (b) {
    case seqsim::Block::ir1:
    case seqsim::Block::ir2: return Strategy::in_and_out;
    case seqsim::Block::mgre: return Strategy::reverse_centric;
    case seqsim::Block::t2prep: return Strategy::centric;
  }
  return Strategy::centric;
}

std::vector<Cell> order_segment(const SegmentAssignment& a, int segment,
                                Strategy strategy) {
  if (segment < 0 || segment >= (int)a.segments.size())
    throw std::invalid_argument("order_segment: bad segment id");
  const auto& seg = a.segments[segment];  // stored center-out
  switch (strategy) {
    case Strategy::centric: return seg;
    case Strategy::reverse_centric: {
      return std::vector<Cell>(seg.rbegin(), seg.rend());
    }
    case Strategy::in_and_out: {
      // k-space center lands at floor(n/2); radii grow toward both ends
      const int n = (int)seg.size();
      std::vector<Cell> out(seg.size());
      const int mid = n / 2;
      out[mid] = seg[0];
      int left = mid - 1, right = mid + 1;
      for (int k = 1; k < n; ++k) {
        const bool go_right = (k % 2 == 1) ? (right < n) : (left < 0);
        if (go_right)
          out[right++] = seg[k];
        else
          out[left--] = seg[k];
      }
      return out;
    }
  }
  throw std::invalid_argument("order_segment: unknown strategy");
}

RGrid baseline_vd_density(int n_ky, int n_kz, double ratio, int n_levels) {
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw std::invalid_argument("vd_mask: ratio must be in (0, 1]");
  if (n_levels < 1) throw std::invalid_argument("vd_mask: n_levels >= 1");

  const double cy = center_y(n_ky), cz = center_y(n_kz);
  const double ay = n_ky / 2.0, az = n_kz / 2.0;
  RGrid density({n_ky, n_kz}, 0.0);
  std::vector<std::int64_t> level_count(n_levels, 0);
  Nd<std::int8_t> level({n_ky, n_kz}, -1);
  std::int64_t n_support = 0;
  for (int i = 0; i < n_ky; ++i)
    for (int j = 0; j < n_kz; ++j) {
      const double u = (i - cy) / ay, v = (j - cz) / az;
      if (u * u + v * v > 1.0) continue;  // same membership test as the support
      const double rho = std::sqrt(u * u + v * v);
      const int l = std::min(n_levels - 1, (int)(rho * n_levels));
      level.at2(i, j) = (std::int8_t)l;
      level_count[l]++;
      n_support++;
    }

  const double want = ratio * (double)n_support;
  if (want < (double)level_count[0] - 1e-9)
    throw std::invalid_argument("vd_mask: ratio below the fully sampled core");

  // innermost level density 1, outer levels q^l; bisect q
  auto expected = [&](double q) {
    double e = (double)level_count[0];
    double d = 1.0;
    for (int l = 1; l < n_levels; ++l) {
      d *= q;
      e += level_count[l] * d;
    }
    return e;
  };
  double q;
  if (expected(1.0) <= want) {
    q = 1.0;
  } else {
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (expected(mid) > want ? hi : lo) = mid;
    }
    q = 0.5 * (lo + hi);
  }
  for (int i = 0; i < n_ky; ++i)
    for (int j = 0; j < n_kz; ++j) {
      const int l = level.at2(i, j);
      if (l < 0) continue;
      density.at2(i, j) = std::pow(q, l);
    }
  return density;
}

MaskGrid baseline_vd_mask(int n_ky, int n_kz, double ratio, int n_levels,
                          Rng& rng) {
  const RGrid density = baseline_vd_density(n_ky, n_kz, ratio, n_levels);
  MaskGrid m({n_ky, n_kz}, 0);
  for (std::int64_t i = 0; i < density.numel(); ++i) {
    if (density[i] <= 0) continue;
    if (rng.uniform() < density[i]) m[i] = 1;
  }
  return m;
}

RGrid prob_from_weights(const RGrid& w, const MaskGrid& support, double a,
                        double target_ratio, bool renormalize) {
  if (!(a > 0)) throw std::invalid_argument("prob_from_weights: a must be > 0");
  if (w.shape() != support.shape())
    throw std::invalid_argument("prob_from_weights: shape mismatch");
  RGrid p(w.shape(), 0.0);
  std::int64_t n_sup = 0;
  double mean = 0;
  for (std::int64_t i = 0; i < w.numel(); ++i) {
    if (!support[i]) continue;
    double s = 1.0 / (1.0 + std::exp(-a * w[i]));
    s = std::min(1.0 - kProbEps, std::max(kProbEps, s));
    p[i] = s;
    mean += s;
    n_sup++;
  }
  if (n_sup == 0) throw std::invalid_argument("prob_from_weights: empty support");
  mean /= (double)n_sup;
  if (!renormalize) return p;

  // Exact mean correction that keeps every value inside (0, 1): shrink
  // toward 0 when the mean is high, shrink the complement when it is low.
  const double t = target_ratio;
  if (mean >= t) {
    const double f = t / mean;
    for (std::int64_t i = 0; i < w.numel(); ++i)
      if (support[i]) p[i] *= f;
  } else {
    const double f = (1.0 - t) / (1.0 - mean);
    for (std::int64_t i = 0; i < w.numel(); ++i)
      if (support[i]) p[i] = 1.0 - (1.0 - p[i]) * f;
  }
  return p;
}

MaskGrid draw_mask(const RGrid& p, Rng& rng, int calib_block) {
  MaskGrid u(p.shape(), 0);
  for (std::int64_t i = 0; i < p.numel(); ++i)
    if (rng.uniform() < p[i]) u[i] = 1;
  if (calib_block > 0) {
    const int ny = p.dim(0), nz = p.dim(1);
    const int y0 = ny / 2 - calib_block / 2, z0 = nz / 2 - calib_block / 2;
    for (int i = std::max(0, y0); i < std::min(ny, y0 + calib_block); ++i)
      for (int j = std::max(0, z0); j < std::min(nz, z0 + calib_block); ++j)
        u.at2(i, j) = 1;
  }
  return u;
}

AcquisitionSchedule schedule_undersampled(
    const std::vector<MaskGrid>& masks, int n_repetitions,
    const seqsim::SequenceParams& seq, const MaskGrid& support) {
  seq.validate();
  if ((int)masks.size() != seq.n_contrasts())
    throw std::invalid_argument("schedule: need one mask per contrast");
  const int ne = seq.n_echoes();
  const int ny = support.dim(0), nz = support.dim(1);
  for (const auto& m : masks) {
    if (m.shape() != support.shape())
      throw std::invalid_argument("schedule: mask/support shape mismatch");
    for (std::int64_t i = 0; i < m.numel(); ++i)
      if (m[i] && !support[i])
        throw std::invalid_argument("schedule: mask outside support");
  }

  auto cells_of = [&](const MaskGrid& m) {
    std::vector<Cell> cells;
    for (int i = 0; i < ny; ++i)
      for (int j = 0; j < nz; ++j)
        if (m.at2(i, j)) cells.push_back({i, j});
    return cells;
  };

  // Per-block line sets; the multi-echo block reads the union of the
  // per-echo masks (one line yields samples for every echo).
  std::array<std::vector<Cell>, seqsim::kNumBlocks> block_cells;
  MaskGrid mgre_union({ny, nz}, 0);
  for (int e = 0; e < ne; ++e)
    for (std::int64_t i = 0; i < mgre_union.numel(); ++i)
      if (masks[e][i]) mgre_union[i] = 1;
  block_cells[(int)seqsim::Block::ir1] = cells_of(masks[ne]);
  block_cells[(int)seqsim::Block::mgre] = cells_of(mgre_union);
  block_cells[(int)seqsim::Block::ir2] = cells_of(masks[ne + 1]);
  block_cells[(int)seqsim::Block::t2prep] = cells_of(masks[ne + 2]);

  const std::int64_t capacity =
      (std::int64_t)n_repetitions * seq.trs_per_segment;
  for (const auto& bc : block_cells)
    if ((std::int64_t)bc.size() > capacity)
      throw std::invalid_argument("schedule: sampled locations exceed capacity");

  AcquisitionSchedule sched;
  sched.n_repetitions = n_repetitions;
  sched.trs_per_segment = seq.trs_per_segment;
  sched.entries.reserve((std::int64_t)4 * capacity);

  std::array<SegmentAssignment, seqsim::kNumBlocks> assign;
  for (int b = 0; b < seqsim::kNumBlocks; ++b)
    assign[b] = fanbeam_on_cells(block_cells[b], ny, nz, n_repetitions,
                                 seq.trs_per_segment, PadMode::pad);

  for (int rep = 0; rep < n_repetitions; ++rep) {
    for (int b = 0; b < seqsim::kNumBlocks; ++b) {
      const auto lines =
          order_segment(assign[b], rep, block_strategy((seqsim::Block)b));
      const int contrast = contrast_of_block((seqsim::Block)b, seq);
      for (int tr = 0; tr < (int)lines.size(); ++tr)
        sched.entries.push_back(
            {rep, b, tr, lines[tr].ky, lines[tr].kz, contrast});
    }
  }

  // Implied masks: echoes keep their own validity inside the shared block
  // line set; single-echo contrasts own their block outright.
  std::array<MaskGrid, seqsim::kNumBlocks> block_mask;
  for (int b = 0; b < seqsim::kNumBlocks; ++b)
    block_mask[b] = assign[b].cell_mask();
  sched.implied_masks.resize(masks.size());
  for (int e = 0; e < ne; ++e) {
    MaskGrid m({ny, nz}, 0);
    for (std::int64_t i = 0; i < m.numel(); ++i)
      m[i] = (masks[e][i] && block_mask[(int)seqsim::Block::mgre][i]) ? 1 : 0;
    sched.implied_masks[e] = std::move(m);
  }
  sched.implied_masks[ne] = block_mask[(int)seqsim::Block::ir1];
  sched.implied_masks[ne + 1] = block_mask[(int)seqsim::Block::ir2];
  sched.implied_masks[ne + 2] = block_mask[(int)seqsim::Block::t2prep];
  return sched;
}

std::vector<MaskGrid> full_scan_masks(const MaskGrid& support,
                                      int n_repetitions, int trs_per_segment,
                                      int n_contrasts) {
  const auto assign = fanbeam_segments(support, n_repetitions, trs_per_segment,
                                       PadMode::error);
  const MaskGrid m = assign.cell_mask();
  return std::vector<MaskGrid>(n_contrasts, m);
}

}  // namespace mclaro::sampling
