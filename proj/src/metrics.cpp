#include "mclaro/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mclaro::metrics {
namespace {

// separable blur with zero padding, matching the trainer-side operator
void blur2d(const std::vector<double>& in, std::vector<double>& out, int h,
            int w, const std::vector<double>& k1d) {
  const int kr = (int)k1d.size() / 2;
  std::vector<double> tmp((size_t)h * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      const int d0 = std::max(-kr, -x), d1 = std::min(kr, w - 1 - x);
      for (int d = d0; d <= d1; ++d) acc += k1d[d + kr] * in[(size_t)y * w + x + d];
      tmp[(size_t)y * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      const int d0 = std::max(-kr, -y), d1 = std::min(kr, h - 1 - y);
      for (int d = d0; d <= d1; ++d) acc += k1d[d + kr] * tmp[(size_t)(y + d) * w + x];
      out[(size_t)y * w + x] = acc;
    }
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> k(size);
  const int c = size / 2;
  double s = 0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    s += k[i];
  }
  for (double& v : k) v /= s;
  return k;
}

}  // namespace

BlandAltmanResult bland_altman(const std::vector<double>& a,
                               const std::vector<double>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("bland_altman: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("bland_altman: need n >= 2");
  BlandAltmanResult r;
  r.n = (int)a.size();
  double sum = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    r.pairs.emplace_back(0.5 * (a[i] + b[i]), d);
    sum += d;
  }
  r.bias = sum / r.n;
  double ss = 0;
  for (const auto& p : r.pairs) ss += (p.second - r.bias) * (p.second - r.bias);
  r.sd = std::sqrt(ss / (r.n - 1));
  r.loa_low = r.bias - 1.96 * r.sd;
  r.loa_high = r.bias + 1.96 * r.sd;
  return r;
}

double blurriness(const RGrid& img) {
  if (img.ndim() != 2) throw std::invalid_argument("blurriness: want 2-d image");
  const int h = img.dim(0), w = img.dim(1);
  const int kr = 4;  // 1x9 averaging kernel
  // blur along one axis at a time
  std::vector<double> bv((size_t)h * w), bh((size_t)h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc_v = 0, acc_h = 0;
      int cnt_v = 0, cnt_h = 0;
      for (int d = -kr; d <= kr; ++d) {
        if (y + d >= 0 && y + d < h) {
          acc_v += img.at2(y + d, x);
          cnt_v++;
        }
        if (x + d >= 0 && x + d < w) {
          acc_h += img.at2(y, x + d);
          cnt_h++;
        }
      }
      bv[(size_t)y * w + x] = acc_v / cnt_v;
      bh[(size_t)y * w + x] = acc_h / cnt_h;
    }

  // neighbor absolute variation before/after, interior only
  double d_iv = 0, d_ih = 0, d_vv = 0, d_vh = 0;
  for (int y = 1; y < h; ++y)
    for (int x = 1; x < w; ++x) {
      const double di_v = std::abs(img.at2(y, x) - img.at2(y - 1, x));
      const double di_h = std::abs(img.at2(y, x) - img.at2(y, x - 1));
      const double db_v =
          std::abs(bv[(size_t)y * w + x] - bv[(size_t)(y - 1) * w + x]);
      const double db_h =
          std::abs(bh[(size_t)y * w + x] - bh[(size_t)y * w + x - 1]);
      d_iv += di_v;
      d_ih += di_h;
      d_vv += std::max(0.0, di_v - db_v);
      d_vh += std::max(0.0, di_h - db_h);
    }
  if (d_iv <= 0 && d_ih <= 0) return 1.0;  // constant image
  double score = 0;
  if (d_iv > 0) score = std::max(score, (d_iv - d_vv) / d_iv);
  if (d_ih > 0) score = std::max(score, (d_ih - d_vh) / d_ih);
  return std::min(1.0, std::max(0.0, score));
}

std::map<int, RoiRow> roi_stats(const RGrid& map, const LabelGrid& labels,
                                const MaskGrid& valid,
                                const std::vector<int>& regions) {
  if (map.shape() != labels.shape() || map.shape() != valid.shape())
    throw std::invalid_argument("roi_stats: dims differ");
  std::map<int, RoiRow> out;
  for (int r : regions) out[r] = RoiRow{};
  for (std::int64_t i = 0; i < map.numel(); ++i) {
    if (!valid[i]) continue;
    auto it = out.find(labels[i]);
    if (it == out.end()) continue;
    it->second.mean += map[i];
    it->second.count++;
  }
  for (auto& [r, row] : out) {
    if (row.count == 0)
      throw std::runtime_error("roi_stats: region " + std::to_string(r) +
                               " empty after validity masking");
    row.mean /= row.count;
  }
  for (std::int64_t i = 0; i < map.numel(); ++i) {
    if (!valid[i]) continue;
    auto it = out.find(labels[i]);
    if (it == out.end()) continue;
    const double d = map[i] - it->second.mean;
    it->second.sd += d * d;
  }
  for (auto& [r, row] : out)
    row.sd = row.count > 1 ? std::sqrt(row.sd / (row.count - 1)) : 0.0;
  return out;
}

double ssim_eval(const RGrid& x, const RGrid& y) {
  if (x.shape() != y.shape() || x.ndim() != 3)
    throw std::invalid_argument("ssim_eval: want matching [C,H,W]");
  const int ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto win = gaussian_window(11, 1.5);
  const std::int64_t plane = (std::int64_t)h * w;

  double total = 0;
  std::vector<double> xs(plane), ys(plane), mx(plane), my(plane), xx(plane),
      yy(plane), xy(plane), sxx(plane), syy(plane), sxy(plane);
  for (int c = 0; c < ch; ++c) {
    double lo = y[(std::int64_t)c * plane], hi = lo;
    for (std::int64_t i = 0; i < plane; ++i) {
      xs[i] = x[c * plane + i];
      ys[i] = y[c * plane + i];
      lo = std::min(lo, ys[i]);
      hi = std::max(hi, ys[i]);
      xx[i] = xs[i] * xs[i];
      yy[i] = ys[i] * ys[i];
      xy[i] = xs[i] * ys[i];
    }
    const double range = std::max(hi - lo, 1e-12);
    const double c1 = (0.01 * range) * (0.01 * range);
    const double c2 = (0.03 * range) * (0.03 * range);
    blur2d(xs, mx, h, w, win);
    blur2d(ys, my, h, w, win);
    blur2d(xx, sxx, h, w, win);
    blur2d(yy, syy, h, w, win);
    blur2d(xy, sxy, h, w, win);
    double acc = 0;
    for (std::int64_t i = 0; i < plane; ++i) {
      const double vxx = sxx[i] - mx[i] * mx[i];
      const double vyy = syy[i] - my[i] * my[i];
      const double vxy = sxy[i] - mx[i] * my[i];
      const double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * vxy + c2);
      const double den =
          (mx[i] * mx[i] + my[i] * my[i] + c1) * (vxx + vyy + c2);
      acc += num / den;
    }
    total += acc / (double)plane;
  }
  return total / ch;
}

}  // namespace mclaro::metrics
