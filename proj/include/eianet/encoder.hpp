#pragma once

#include <cstdint>
#include <vector>

#include "eianet/attention.hpp"
#include "eianet/config.hpp"
#include "eianet/tensor.hpp"

namespace eianet {

struct ConvBlock {
    Tensor weight;  // C_out x C_in x 3 x 3
    Tensor bias;    // C_out
};

// Small convolutional encoder: conv blocks with 2x2 average pooling between
// them, optional spatial self-attention on the final map, global average
// pooling, and a linear projection into the unit sphere of R^d.
struct EncoderModel {
    std::vector<ConvBlock> blocks;
    AttentionLayer attention;
    Tensor proj_weight;  // C_last x d
    Tensor proj_bias;    // d
    bool use_attention = true;
    size_t image_size = 32;

    // Every trainable tensor in fixed order (conv blocks, attention,
    // projection); the checkpoint block order matches this.
    std::vector<Tensor> trainable_params() const;
};

EncoderModel init_encoder(const RunConfig& cfg, uint64_t seed);

// images: B x 3 x S x S with S = image_size. Output rows are unit-norm
// feature vectors in R^d.
Tensor encoder_forward(const EncoderModel& m, const Tensor& images);

}  // namespace eianet
