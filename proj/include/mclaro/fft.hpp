#pragma once

#include "mclaro/array.hpp"

namespace mclaro::fft {

// Centered, orthonormal DFTs: DC sits at index floor(n/2) on every axis,
// and ||fft(x)|| == ||x||. fft2c operates on the last two axes of a 2-d
// grid; fft3c on a 3-d grid.
CGrid fft2c(const CGrid& x);
CGrid ifft2c(const CGrid& x);
CGrid fft3c(const CGrid& x);
CGrid ifft3c(const CGrid& x);

// In-place variants used by hot paths.
void fft2c_inplace(CGrid& x);
void ifft2c_inplace(CGrid& x);

}  // namespace mclaro::fft
