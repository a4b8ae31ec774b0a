#include "eianet/attention.hpp"

#include <cmath>

#include "eianet/errors.hpp"
#include "eianet/init.hpp"

namespace eianet {

size_t attention_reduced_channels(size_t channels) {
    return channels >= 8 ? channels / 8 : 1;
}

AttentionLayer init_attention(size_t channels, uint64_t seed) {
    if (channels == 0) throw ConfigError("init_attention: channels must be positive");
    const size_t cr = attention_reduced_channels(channels);
    Rng rng(seed);
    AttentionLayer layer;
    layer.wq = fan_in_uniform(rng, {cr, channels, 1, 1}, channels);
    layer.wk = fan_in_uniform(rng, {cr, channels, 1, 1}, channels);
    layer.wv = fan_in_uniform(rng, {channels, channels, 1, 1}, channels);
    layer.gamma = Tensor::scalar(0.0, /*requires_grad=*/true);
    return layer;
}

Tensor attention_forward(const AttentionLayer& layer, const Tensor& x) {
    if (x.rank() != 4)
        throw DimensionError("attention_forward: expected B x C x H x W, got " +
                             shape_str(x.shape()));
    const size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (c != layer.channels())
        throw DimensionError("attention_forward: input channels " +
                             std::to_string(c) + " do not match layer channels " +
                             std::to_string(layer.channels()));
    const size_t hw = h * w;
    const size_t cr = layer.reduced_channels();

    Tensor q = conv2d(x, layer.wq, 1, 0);  // B x C_r x H x W
    Tensor k = conv2d(x, layer.wk, 1, 0);
    Tensor v = conv2d(x, layer.wv, 1, 0);  // B x C x H x W

    Tensor q_flat = batch_transpose(reshape(q, {b, cr, hw}));  // B x HW x C_r
    Tensor k_flat = reshape(k, {b, cr, hw});                   // B x C_r x HW
    Tensor v_flat = reshape(v, {b, c, hw});                    // B x C  x HW

    // Scaling factor comes from the key dimensionality.
    Tensor scores =
        mul_scalar(batch_matmul(q_flat, k_flat), 1.0 / std::sqrt(static_cast<double>(cr)));
    Tensor attn = softmax(scores, 2);  // rows (query positions) sum to 1

    Tensor attended = batch_matmul(v_flat, batch_transpose(attn));  // B x C x HW
    Tensor gated = scale_by(reshape(attended, {b, c, h, w}), layer.gamma);
    return add(x, gated);
}

}  // namespace eianet
