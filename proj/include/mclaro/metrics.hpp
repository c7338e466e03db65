#pragma once

#include <map>
#include <string>
#include <vector>

#include "mclaro/array.hpp"

namespace mclaro::metrics {

struct BlandAltmanResult {
  double bias = 0;
  double sd = 0;  // sample (n-1) standard deviation of the differences
  double loa_low = 0, loa_high = 0;
  int n = 0;
  std::vector<std::pair<double, double>> pairs;  // (mean, difference a-b)
};

BlandAltmanResult bland_altman(const std::vector<double>& a,
                               const std::vector<double>& b);

// Reference-free blur estimate: re-blur with a 1x9 averaging kernel along
// each axis, compare retained neighbor variation, take the worse axis.
// 0 = sharp, 1 = fully blurred; a constant image scores 1.
double blurriness(const RGrid& image2d);

struct RoiRow {
  double mean = 0, sd = 0;
  std::int64_t count = 0;
};

// Per-region mean/sd over valid voxels.
std::map<int, RoiRow> roi_stats(const RGrid& map, const LabelGrid& labels,
                                const MaskGrid& valid,
                                const std::vector<int>& regions);

// Same formula as the differentiable trainer loss, evaluation path.
double ssim_eval(const RGrid& x, const RGrid& y_ref);  // [C,H,W]

}  // namespace mclaro::metrics
