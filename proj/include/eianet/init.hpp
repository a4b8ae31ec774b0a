#pragma once

#include "eianet/rng.hpp"
#include "eianet/tensor.hpp"

namespace eianet {

// Scaled uniform fan-in initialization: U(-a, a) with a = sqrt(3 / fan_in),
// i.e. variance 1/fan_in. Draw order is the flat row-major index.
inline Tensor fan_in_uniform(Rng& rng, Shape shape, size_t fan_in) {
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = rng.uniform(-bound, bound);
    return Tensor::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
}

}  // namespace eianet
