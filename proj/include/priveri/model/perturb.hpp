#pragma once

#include <cstddef>
#include <span>

#include "priveri/model/params.hpp"
#include "priveri/model/train.hpp"

// Model substitutions a dishonest provider might serve instead of the real
// weights. Each returns a freshly sealed ModelParams.
namespace priveri::model {

/// Replaces every attention and MLP weight matrix W by its rank-r truncated
/// SVD U V^T. Embeddings, norms and the unembedding are left untouched.
/// ArgumentError unless 1 <= r <= the smallest dimension of those matrices.
ModelParams perturb_low_rank(const ModelParams& params, std::size_t r);

/// Per-tensor symmetric quantization of every tensor:
/// scale = max|w| / (2^(bits-1) - 1), w -> round(w / scale) * scale.
/// All-zero tensors pass through. ArgumentError unless 2 <= bits <= 16.
ModelParams perturb_quantize(const ModelParams& params, int bits);

/// One SGD step of next-token cross-entropy on `batch`.
ModelParams perturb_finetune_step(const ModelParams& params, std::span<const Sequence> batch,
                                  double lr);

/// Symmetric quantization of a single tensor (see perturb_quantize).
Tensor quantize_symmetric(const Tensor& w, int bits);

}  // namespace priveri::model
