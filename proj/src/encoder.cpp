#include "eianet/encoder.hpp"

#include "eianet/errors.hpp"
#include "eianet/init.hpp"

namespace eianet {

std::vector<Tensor> EncoderModel::trainable_params() const {
    std::vector<Tensor> params;
    for (const ConvBlock& b : blocks) {
        params.push_back(b.weight);
        params.push_back(b.bias);
    }
    params.push_back(attention.wq);
    params.push_back(attention.wk);
    params.push_back(attention.wv);
    params.push_back(attention.gamma);
    params.push_back(proj_weight);
    params.push_back(proj_bias);
    return params;
}

EncoderModel init_encoder(const RunConfig& cfg, uint64_t seed) {
    cfg.validate();

    Rng rng(seed);
    EncoderModel m;
    m.use_attention = cfg.use_attention;
    m.image_size = cfg.image_size;

    size_t in_channels = 3;
    for (size_t width : cfg.encoder_widths) {
        ConvBlock block;
        block.weight = fan_in_uniform(rng, {width, in_channels, 3, 3}, in_channels * 9);
        block.bias = Tensor::zeros({width}, /*requires_grad=*/true);
        m.blocks.push_back(std::move(block));
        in_channels = width;
    }

    const size_t last = cfg.encoder_widths.back();
    const size_t cr = attention_reduced_channels(last);
    m.attention.wq = fan_in_uniform(rng, {cr, last, 1, 1}, last);
    m.attention.wk = fan_in_uniform(rng, {cr, last, 1, 1}, last);
    m.attention.wv = fan_in_uniform(rng, {last, last, 1, 1}, last);
    m.attention.gamma = Tensor::scalar(0.0, /*requires_grad=*/true);

    m.proj_weight = fan_in_uniform(rng, {last, cfg.feature_dim}, last);
    m.proj_bias = Tensor::zeros({cfg.feature_dim}, /*requires_grad=*/true);
    return m;
}

Tensor encoder_forward(const EncoderModel& m, const Tensor& images) {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != m.image_size ||
        images.dim(3) != m.image_size)
        throw DimensionError("encoder_forward: expected B x 3 x " +
                             std::to_string(m.image_size) + " x " +
                             std::to_string(m.image_size) + ", got " +
                             shape_str(images.shape()));

    Tensor x = images;
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        x = relu(add_channel_bias(conv2d(x, m.blocks[i].weight, 1, 1), m.blocks[i].bias));
        if (i + 1 < m.blocks.size()) x = avg_pool2d(x, 2);
    }
    if (m.use_attention) x = attention_forward(m.attention, x);
    Tensor pooled = global_average_pool(x);
    Tensor features = add_row_bias(matmul(pooled, m.proj_weight), m.proj_bias);
    return l2_normalize(features, 1);
}

}  // namespace eianet
