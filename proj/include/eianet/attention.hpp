#pragma once

#include <cstdint>

#include "eianet/tensor.hpp"

namespace eianet {

// Spatial self-attention with 1x1 conv projections. Query/key live in a
// reduced space of C_r = max(1, C/8) channels; the value keeps C channels.
// The output is the gated residual x + gamma * attended, with gamma a
// learnable scalar initialized to 0 so a fresh layer is the identity.
struct AttentionLayer {
    Tensor wq;     // C_r x C x 1 x 1
    Tensor wk;     // C_r x C x 1 x 1
    Tensor wv;     // C x C x 1 x 1
    Tensor gamma;  // scalar

    size_t channels() const { return wv.dim(0); }
    size_t reduced_channels() const { return wq.dim(0); }
};

size_t attention_reduced_channels(size_t channels);

AttentionLayer init_attention(size_t channels, uint64_t seed);

// softmax(Q K^T / sqrt(C_r)) over the key axis, applied to V, then gated
// into the residual. x is B x C x H x W; output has the same shape.
Tensor attention_forward(const AttentionLayer& layer, const Tensor& x);

}  // namespace eianet
