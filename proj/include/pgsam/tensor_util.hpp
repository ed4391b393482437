#pragma once

#include <torch/torch.h>

#include "pgsam/data.hpp"
#include "pgsam/grid.hpp"

namespace pgsam {

torch::Tensor to_tensor(const Image& img);
torch::Tensor to_tensor(const BinaryGrid& g);
/// [c,H,W] float tensor from a slice.
torch::Tensor to_tensor(const data::MultiSequenceSlice& slice);
Image to_image(const torch::Tensor& t);
BinaryGrid to_binary(const torch::Tensor& t, double threshold = 0.5);

/// Throws NumericalError naming `what` if `t` contains NaN or Inf.
void check_finite(const torch::Tensor& t, const char* what);

}  // namespace pgsam
