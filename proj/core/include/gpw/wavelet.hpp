#pragma once

// Single-level orthonormal 2D Haar transform. For a 2×2 block [[a,b],[c,d]]:
//   ll = (a+b+c+d)/2   lh = (a+b-c-d)/2
//   hl = (a-b+c-d)/2   hh = (a-b-c+d)/2
// The analysis matrix is its own inverse, so iwt2 applies the same filters.

#include <cstddef>

#include "gpw/ndgrad.hpp"

namespace gpw::wavelet {

using nd::Tensor;

// Rows/columns appended by reflection so the input extents became even.
struct EdgePadding {
  std::size_t bottom = 0;
  std::size_t right = 0;
};

struct SubbandSet {
  Tensor ll, lh, hl, hh;
  EdgePadding padding;
};

// [N,C,H,W] -> four [N,C,ceil(H/2),ceil(W/2)] subbands. Odd extents are
// reflection-padded and the padding recorded for iwt2.
SubbandSet dwt2(const Tensor& x);

// Inverse of dwt2; crops any recorded padding.
Tensor iwt2(const SubbandSet& s);

// [N,C,H,W] -> [N,4C,H/2,W/2], channel blocks ordered (ll, lh, hl, hh).
// Requires even H and W.
Tensor dwt_concat(const Tensor& x);

// Inverse of dwt_concat: [N,4C,h,w] -> [N,C,2h,2w].
Tensor iwt_concat(const Tensor& x);

// Splits a dwt_concat result back into its four subbands.
SubbandSet split_subbands(const Tensor& concatenated);

}  // namespace gpw::wavelet
