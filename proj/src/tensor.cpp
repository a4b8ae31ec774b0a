#include "eianet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "eianet/errors.hpp"
#include "eianet/rng.hpp"

namespace eianet {

namespace {

thread_local Tape* g_active_tape = nullptr;

using Node = std::shared_ptr<TensorData>;

Node make_node(Shape shape, std::vector<double> data) {
    auto n = std::make_shared<TensorData>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

bool any_tracked(std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs)
        if (t->node()->tracked()) return true;
    return false;
}

// Marks `out` as recorded and pushes the backward step if a tape is active
// and any input feeds gradients.
void record(std::initializer_list<const Tensor*> inputs, const Tensor& out,
            std::function<void()> backprop) {
    Tape* tape = Tape::active();
    if (!tape || tape->consumed()) return;
    if (!any_tracked(inputs)) return;
    out.node()->on_tape = true;
    out.node()->tape = tape->core();
    tape->core()->steps.push_back(std::move(backprop));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch: " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void check_rank(const Tensor& a, size_t rank, const char* op) {
    if (a.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " +
                             std::to_string(rank) + ", got " + shape_str(a.shape()));
}

// axis decomposition outer x n x inner for reductions along one axis
struct AxisSpan {
    size_t outer, n, inner;
};

AxisSpan axis_span(const Shape& shape, size_t axis, const char* op) {
    if (axis >= shape.size())
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for " + shape_str(shape));
    AxisSpan s{1, shape[axis], 1};
    for (size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << " x ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const size_t n = shape_numel(shape);
    auto node = make_node(std::move(shape), std::vector<double>(n, 0.0));
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const size_t n = shape_numel(shape);
    auto node = make_node(std::move(shape), std::vector<double>(n, value));
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw DimensionError("from_data: shape " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    auto node = make_node(std::move(shape), std::move(values));
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

double Tensor::item() const {
    if (numel() != 1)
        throw ContractError("item: tensor is not scalar: " + shape_str(shape()));
    return d_->data[0];
}

void Tensor::apply_update(const std::vector<double>& delta) {
    if (d_->on_tape)
        throw ContractError("apply_update: refusing to mutate a tensor produced on a tape");
    if (delta.size() != d_->data.size())
        throw DimensionError("apply_update: delta size mismatch");
    for (size_t i = 0; i < delta.size(); ++i) d_->data[i] += delta[i];
}

void Tensor::set_values(const std::vector<double>& values) {
    if (d_->on_tape)
        throw ContractError("set_values: refusing to mutate a tensor produced on a tape");
    if (values.size() != d_->data.size())
        throw DimensionError("set_values: size mismatch");
    d_->data = values;
}

// ------------------------------------------------------------------ Tape

Tape::Tape() : core_(std::make_shared<TapeCore>()) {
    previous_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    auto core = loss.node()->tape.lock();
    if (!loss.node()->on_tape || !core)
        throw ContractError("backward: loss was not produced on a live tape");
    if (core->consumed)
        throw ContractError("backward: tape already consumed");
    core->consumed = true;
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = core->steps.rbegin(); it != core->steps.rend(); ++it) (*it)();
}

// ------------------------------------------------------ elementwise ops

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const size_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    for (size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
    Tensor y = Tensor::wrap(make_node(a.shape(), std::move(out)));
    record({&a, &b}, y, [an = a.node(), bn = b.node(), yn = y.node()] {
        if (yn->grad.empty()) return;
        const size_t n = yn->grad.size();
        if (an->tracked()) {
            an->ensure_grad();
            for (size_t i = 0; i < n; ++i) an->grad[i] += yn->grad[i];
        }
        if (bn->tracked()) {
            bn->ensure_grad();
            for (size_t i = 0; i < n; ++i) bn->grad[i] += yn->grad[i];
        }
    });
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    const size_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    for (size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
    Tensor y = Tensor::wrap(make_node(a.shape(), std::move(out)));
    record({&a, &b}, y, [an = a.node(), bn = b.node(), yn = y.node()] {
        if (yn->grad.empty()) return;
        const size_t n = yn->grad.size();
        if (an->tracked()) {
            an->ensure_grad();
            for (size_t i = 0; i < n; ++i) an->grad[i] += yn->grad[i];
        }
        if (bn->tracked()) {
            bn->ensure_grad();
            for (size_t i = 0; i < n; ++i) bn->grad[i] -= yn->grad[i];
        }
    });
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const size_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    for (size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
    Tensor y = Tensor::wrap(make_node(a.shape(), std::move(out)));
    record({&a, &b}, y, [an = a.node(), bn = b.node(), yn = y.node()] {
        if (yn->grad.empty()) return;
        const size_t n = yn->grad.size();
        if (an->tracked()) {
            an->ensure_grad();
            for (size_t i = 0; i < n; ++i) an->grad[i] += yn->grad[i] * bn->data[i];
        }
        if (bn->tracked()) {
            bn->ensure_grad();
            for (size_t i = 0; i < n; ++i) bn->grad[i] += yn->grad[i] * an->data[i];
        }
    });
    return y;
}

Tensor add_scalar(const Tensor& a, double c) {
    const size_t n = a.numel();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.values()[i] + c;
    Tensor y = Tensor::wrap(make_node(a.shape(), std::move(out)));
    record({&a}, y, [an = a.node(), yn = y.node()] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        for (size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i];
    });
    return y;
}

Tensor mul_scalar(const Tensor& a, double c) {
    const size_t n = a.numel();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.values()[i] * c;
    Tensor y = Tensor::wrap(make_node(a.shape(), std::move(out)));
    record({&a}, y, [an = a.node(), yn = y.node(), c] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        for (size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i] * c;
    });
    return y;
}

Tensor relu(const Tensor& a) {
    const size_t n = a.numel();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    Tensor y = Tensor::wrap(make_node(a.shape(), std::move(out)));
    record({&a}, y, [an = a.node(), yn = y.node()] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        for (size_t i = 0; i < yn->grad.size(); ++i)
            if (an->data[i] > 0.0) an->grad[i] += yn->grad[i];
    });
    return y;
}

Tensor log(const Tensor& a, double floor) {
    const size_t n = a.numel();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) {
        const double v = a.values()[i];
        out[i] = std::log(floor > 0.0 && v < floor ? floor : v);
    }
    Tensor y = Tensor::wrap(make_node(a.shape(), std::move(out)));
    record({&a}, y, [an = a.node(), yn = y.node(), floor] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        for (size_t i = 0; i < yn->grad.size(); ++i) {
            const double v = an->data[i];
            if (floor > 0.0 && v < floor) continue;  // clamped: flat
            an->grad[i] += yn->grad[i] / v;
        }
    });
    return y;
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor y = Tensor::wrap(make_node({1}, {s}));
    record({&a}, y, [an = a.node(), yn = y.node()] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        const double g = yn->grad[0];
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    });
    return y;
}

Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    const double inv = 1.0 / static_cast<double>(a.numel());
    Tensor y = Tensor::wrap(make_node({1}, {s * inv}));
    record({&a}, y, [an = a.node(), yn = y.node(), inv] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        const double g = yn->grad[0] * inv;
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    });
    return y;
}

// ------------------------------------------------------------ shape ops

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) +
                             " as " + shape_str(shape));
    Tensor y = Tensor::wrap(make_node(std::move(shape), a.values()));
    record({&a}, y, [an = a.node(), yn = y.node()] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        for (size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i];
    });
    return y;
}

Tensor transpose(const Tensor& a) {
    check_rank(a, 2, "transpose");
    const size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
    Tensor y = Tensor::wrap(make_node({n, m}, std::move(out)));
    record({&a}, y, [an = a.node(), yn = y.node(), m, n] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) an->grad[i * n + j] += yn->grad[j * m + i];
    });
    return y;
}

Tensor batch_transpose(const Tensor& a) {
    check_rank(a, 3, "batch_transpose");
    const size_t b = a.dim(0), m = a.dim(1), n = a.dim(2);
    std::vector<double> out(b * m * n);
    for (size_t k = 0; k < b; ++k) {
        const double* src = a.values().data() + k * m * n;
        double* dst = out.data() + k * m * n;
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    Tensor y = Tensor::wrap(make_node({b, n, m}, std::move(out)));
    record({&a}, y, [an = a.node(), yn = y.node(), b, m, n] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        for (size_t k = 0; k < b; ++k) {
            double* ga = an->grad.data() + k * m * n;
            const double* gy = yn->grad.data() + k * m * n;
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) ga[i * n + j] += gy[j * m + i];
        }
    });
    return y;
}

Tensor gather_rows(const Tensor& a, const std::vector<size_t>& rows) {
    check_rank(a, 2, "gather_rows");
    const size_t n = a.dim(1);
    for (size_t r : rows)
        if (r >= a.dim(0))
            throw DimensionError("gather_rows: row " + std::to_string(r) +
                                 " out of range for " + shape_str(a.shape()));
    std::vector<double> out(rows.size() * n);
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy_n(a.values().data() + rows[i] * n, n, out.data() + i * n);
    Tensor y = Tensor::wrap(make_node({rows.size(), n}, std::move(out)));
    record({&a}, y, [an = a.node(), yn = y.node(), rows, n] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        for (size_t i = 0; i < rows.size(); ++i)
            for (size_t j = 0; j < n; ++j)
                an->grad[rows[i] * n + j] += yn->grad[i * n + j];
    });
    return y;
}

Tensor tile_rows(const Tensor& row, size_t count) {
    size_t n = 0;
    if (row.rank() == 1) n = row.dim(0);
    else if (row.rank() == 2 && row.dim(0) == 1) n = row.dim(1);
    else
        throw DimensionError("tile_rows: expected [K] or 1 x K, got " +
                             shape_str(row.shape()));
    std::vector<double> out(count * n);
    for (size_t i = 0; i < count; ++i)
        std::copy_n(row.values().data(), n, out.data() + i * n);
    Tensor y = Tensor::wrap(make_node({count, n}, std::move(out)));
    record({&row}, y, [rn = row.node(), yn = y.node(), count, n] {
        if (yn->grad.empty() || !rn->tracked()) return;
        rn->ensure_grad();
        for (size_t i = 0; i < count; ++i)
            for (size_t j = 0; j < n; ++j) rn->grad[j] += yn->grad[i * n + j];
    });
    return y;
}

// --------------------------------------------------------------- matmul

namespace {

void matmul_forward(const double* a, const double* b, double* out, size_t m,
                    size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        double* orow = out + i * n;
        for (size_t kk = 0; kk < k; ++kk) {
            const double av = a[i * k + kk];
            const double* brow = b + kk * n;
            for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

void matmul_backward(const double* a, const double* b, const double* gy,
                     double* ga, double* gb, size_t m, size_t k, size_t n) {
    if (ga) {
        for (size_t i = 0; i < m; ++i)
            for (size_t kk = 0; kk < k; ++kk) {
                const double* brow = b + kk * n;
                const double* gyrow = gy + i * n;
                double acc = 0.0;
                for (size_t j = 0; j < n; ++j) acc += gyrow[j] * brow[j];
                ga[i * k + kk] += acc;
            }
    }
    if (gb) {
        for (size_t i = 0; i < m; ++i)
            for (size_t kk = 0; kk < k; ++kk) {
                const double av = a[i * k + kk];
                const double* gyrow = gy + i * n;
                double* gbrow = gb + kk * n;
                for (size_t j = 0; j < n; ++j) gbrow[j] += av * gyrow[j];
            }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank(a, 2, "matmul");
    check_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner dimensions disagree: " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    matmul_forward(a.values().data(), b.values().data(), out.data(), m, k, n);
    Tensor y = Tensor::wrap(make_node({m, n}, std::move(out)));
    record({&a, &b}, y, [an = a.node(), bn = b.node(), yn = y.node(), m, k, n] {
        if (yn->grad.empty()) return;
        double* ga = nullptr;
        double* gb = nullptr;
        if (an->tracked()) { an->ensure_grad(); ga = an->grad.data(); }
        if (bn->tracked()) { bn->ensure_grad(); gb = bn->grad.data(); }
        matmul_backward(an->data.data(), bn->data.data(), yn->grad.data(), ga, gb,
                        m, k, n);
    });
    return y;
}

Tensor batch_matmul(const Tensor& a, const Tensor& b) {
    check_rank(a, 3, "batch_matmul");
    check_rank(b, 3, "batch_matmul");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw DimensionError("batch_matmul: incompatible shapes: " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<double> out(bs * m * n, 0.0);
    for (size_t i = 0; i < bs; ++i)
        matmul_forward(a.values().data() + i * m * k, b.values().data() + i * k * n,
                       out.data() + i * m * n, m, k, n);
    Tensor y = Tensor::wrap(make_node({bs, m, n}, std::move(out)));
    record({&a, &b}, y, [an = a.node(), bn = b.node(), yn = y.node(), bs, m, k, n] {
        if (yn->grad.empty()) return;
        double* ga = nullptr;
        double* gb = nullptr;
        if (an->tracked()) { an->ensure_grad(); ga = an->grad.data(); }
        if (bn->tracked()) { bn->ensure_grad(); gb = bn->grad.data(); }
        for (size_t i = 0; i < bs; ++i)
            matmul_backward(an->data.data() + i * m * k, bn->data.data() + i * k * n,
                            yn->grad.data() + i * m * n,
                            ga ? ga + i * m * k : nullptr,
                            gb ? gb + i * k * n : nullptr, m, k, n);
    });
    return y;
}

// --------------------------------------------------------------- conv2d

namespace {

struct ConvDims {
    size_t batch, cin, h, w;
    size_t cout, kh, kw;
    size_t stride, pad;
    size_t oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, size_t stride, size_t pad) {
    check_rank(x, 4, "conv2d");
    check_rank(w, 4, "conv2d");
    ConvDims d{};
    d.batch = x.dim(0);
    d.cin = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.cout = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    d.pad = pad;
    if (w.dim(1) != d.cin)
        throw DimensionError("conv2d: kernel channels " + shape_str(w.shape()) +
                             " do not match input " + shape_str(x.shape()));
    if ((d.kh != 1 && d.kh != 3) || (d.kw != 1 && d.kw != 3))
        throw DimensionError("conv2d: kernel sides must be 1 or 3, got " +
                             shape_str(w.shape()));
    if (stride == 0) throw DimensionError("conv2d: stride must be positive");
    const int64_t oh_num = static_cast<int64_t>(d.h) + 2 * static_cast<int64_t>(pad) -
                           static_cast<int64_t>(d.kh);
    const int64_t ow_num = static_cast<int64_t>(d.w) + 2 * static_cast<int64_t>(pad) -
                           static_cast<int64_t>(d.kw);
    if (oh_num < 0 || ow_num < 0 || oh_num % static_cast<int64_t>(stride) != 0 ||
        ow_num % static_cast<int64_t>(stride) != 0)
        throw DimensionError("conv2d: non-integral output size for input " +
                             shape_str(x.shape()) + ", kernel " + shape_str(w.shape()) +
                             ", stride " + std::to_string(stride) + ", padding " +
                             std::to_string(pad));
    d.oh = static_cast<size_t>(oh_num) / stride + 1;
    d.ow = static_cast<size_t>(ow_num) / stride + 1;
    return d;
}

// Valid output range along one spatial axis for a given kernel offset:
// all o in [lo, hi) with 0 <= o*stride - pad + k < extent.
void conv_axis_bounds(size_t out_len, size_t extent, size_t stride, size_t pad,
                      size_t k, size_t* lo, size_t* hi) {
    const int64_t shift = static_cast<int64_t>(k) - static_cast<int64_t>(pad);
    const int64_t top = static_cast<int64_t>(extent) - 1 - shift;
    if (top < 0) {  // no valid position at all
        *lo = *hi = 0;
        return;
    }
    int64_t l = 0;
    if (shift < 0)
        l = (-shift + static_cast<int64_t>(stride) - 1) / static_cast<int64_t>(stride);
    int64_t h = top / static_cast<int64_t>(stride);
    if (h > static_cast<int64_t>(out_len) - 1) h = static_cast<int64_t>(out_len) - 1;
    if (h < l) {
        *lo = *hi = 0;
        return;
    }
    *lo = static_cast<size_t>(l);
    *hi = static_cast<size_t>(h + 1);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, size_t stride, size_t padding) {
    const ConvDims d = conv_dims(x, w, stride, padding);
    std::vector<double> out(d.batch * d.cout * d.oh * d.ow, 0.0);
    const double* px = x.values().data();
    const double* pw = w.values().data();
    for (size_t b = 0; b < d.batch; ++b)
        for (size_t f = 0; f < d.cout; ++f) {
            double* obase = out.data() + (b * d.cout + f) * d.oh * d.ow;
            for (size_t c = 0; c < d.cin; ++c) {
                const double* xbase = px + (b * d.cin + c) * d.h * d.w;
                for (size_t ki = 0; ki < d.kh; ++ki)
                    for (size_t kj = 0; kj < d.kw; ++kj) {
                        const double wv = pw[((f * d.cin + c) * d.kh + ki) * d.kw + kj];
                        size_t olo, ohi, plo, phi;
                        conv_axis_bounds(d.oh, d.h, d.stride, d.pad, ki, &olo, &ohi);
                        conv_axis_bounds(d.ow, d.w, d.stride, d.pad, kj, &plo, &phi);
                        for (size_t oh = olo; oh < ohi; ++oh) {
                            const size_t ih = oh * d.stride - d.pad + ki;
                            const double* xrow = xbase + ih * d.w;
                            double* orow = obase + oh * d.ow;
                            for (size_t ow_i = plo; ow_i < phi; ++ow_i)
                                orow[ow_i] += wv * xrow[ow_i * d.stride - d.pad + kj];
                        }
                    }
            }
        }
    Tensor y = Tensor::wrap(make_node({d.batch, d.cout, d.oh, d.ow}, std::move(out)));
    record({&x, &w}, y, [xn = x.node(), wn = w.node(), yn = y.node(), d] {
        if (yn->grad.empty()) return;
        const bool want_x = xn->tracked();
        const bool want_w = wn->tracked();
        if (want_x) xn->ensure_grad();
        if (want_w) wn->ensure_grad();
        const double* gy = yn->grad.data();
        for (size_t b = 0; b < d.batch; ++b)
            for (size_t f = 0; f < d.cout; ++f) {
                const double* gybase = gy + (b * d.cout + f) * d.oh * d.ow;
                for (size_t c = 0; c < d.cin; ++c) {
                    const double* xbase = xn->data.data() + (b * d.cin + c) * d.h * d.w;
                    double* gxbase = want_x ? xn->grad.data() + (b * d.cin + c) * d.h * d.w
                                            : nullptr;
                    for (size_t ki = 0; ki < d.kh; ++ki)
                        for (size_t kj = 0; kj < d.kw; ++kj) {
                            const size_t widx = ((f * d.cin + c) * d.kh + ki) * d.kw + kj;
                            const double wv = wn->data[widx];
                            size_t olo, ohi, plo, phi;
                            conv_axis_bounds(d.oh, d.h, d.stride, d.pad, ki, &olo, &ohi);
                            conv_axis_bounds(d.ow, d.w, d.stride, d.pad, kj, &plo, &phi);
                            double wacc = 0.0;
                            for (size_t oh = olo; oh < ohi; ++oh) {
                                const size_t ih = oh * d.stride - d.pad + ki;
                                const double* gyrow = gybase + oh * d.ow;
                                const double* xrow = xbase + ih * d.w;
                                double* gxrow = want_x ? gxbase + ih * d.w : nullptr;
                                for (size_t ow_i = plo; ow_i < phi; ++ow_i) {
                                    const size_t iw = ow_i * d.stride - d.pad + kj;
                                    const double g = gyrow[ow_i];
                                    if (want_x) gxrow[iw] += wv * g;
                                    wacc += xrow[iw] * g;
                                }
                            }
                            if (want_w) wn->grad[widx] += wacc;
                        }
                }
            }
    });
    return y;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    check_rank(x, 4, "add_channel_bias");
    check_rank(bias, 1, "add_channel_bias");
    if (bias.dim(0) != x.dim(1))
        throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) +
                             " does not match channels of " + shape_str(x.shape()));
    const size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<double> out(x.values());
    for (size_t bi = 0; bi < b; ++bi)
        for (size_t ci = 0; ci < c; ++ci) {
            const double bv = bias.values()[ci];
            double* row = out.data() + (bi * c + ci) * hw;
            for (size_t i = 0; i < hw; ++i) row[i] += bv;
        }
    Tensor y = Tensor::wrap(make_node(x.shape(), std::move(out)));
    record({&x, &bias}, y, [xn = x.node(), bn = bias.node(), yn = y.node(), b, c, hw] {
        if (yn->grad.empty()) return;
        if (xn->tracked()) {
            xn->ensure_grad();
            for (size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
        }
        if (bn->tracked()) {
            bn->ensure_grad();
            for (size_t bi = 0; bi < b; ++bi)
                for (size_t ci = 0; ci < c; ++ci) {
                    const double* row = yn->grad.data() + (bi * c + ci) * hw;
                    double acc = 0.0;
                    for (size_t i = 0; i < hw; ++i) acc += row[i];
                    bn->grad[ci] += acc;
                }
        }
    });
    return y;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    check_rank(x, 2, "add_row_bias");
    check_rank(bias, 1, "add_row_bias");
    if (bias.dim(0) != x.dim(1))
        throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) +
                             " does not match columns of " + shape_str(x.shape()));
    const size_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(x.values());
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[i * n + j] += bias.values()[j];
    Tensor y = Tensor::wrap(make_node(x.shape(), std::move(out)));
    record({&x, &bias}, y, [xn = x.node(), bn = bias.node(), yn = y.node(), m, n] {
        if (yn->grad.empty()) return;
        if (xn->tracked()) {
            xn->ensure_grad();
            for (size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
        }
        if (bn->tracked()) {
            bn->ensure_grad();
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) bn->grad[j] += yn->grad[i * n + j];
        }
    });
    return y;
}

Tensor avg_pool2d(const Tensor& x, size_t window) {
    check_rank(x, 4, "avg_pool2d");
    if (window == 0 || x.dim(2) % window != 0 || x.dim(3) % window != 0)
        throw DimensionError("avg_pool2d: window " + std::to_string(window) +
                             " does not tile " + shape_str(x.shape()));
    const size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const size_t oh = h / window, ow = w / window;
    const double inv = 1.0 / static_cast<double>(window * window);
    std::vector<double> out(b * c * oh * ow, 0.0);
    for (size_t bc = 0; bc < b * c; ++bc) {
        const double* src = x.values().data() + bc * h * w;
        double* dst = out.data() + bc * oh * ow;
        for (size_t i = 0; i < oh; ++i)
            for (size_t j = 0; j < ow; ++j) {
                double acc = 0.0;
                for (size_t di = 0; di < window; ++di)
                    for (size_t dj = 0; dj < window; ++dj)
                        acc += src[(i * window + di) * w + j * window + dj];
                dst[i * ow + j] = acc * inv;
            }
    }
    Tensor y = Tensor::wrap(make_node({b, c, oh, ow}, std::move(out)));
    record({&x}, y, [xn = x.node(), yn = y.node(), b, c, h, w, oh, ow, window, inv] {
        if (yn->grad.empty() || !xn->tracked()) return;
        xn->ensure_grad();
        for (size_t bc = 0; bc < b * c; ++bc) {
            double* gx = xn->grad.data() + bc * h * w;
            const double* gy = yn->grad.data() + bc * oh * ow;
            for (size_t i = 0; i < oh; ++i)
                for (size_t j = 0; j < ow; ++j) {
                    const double g = gy[i * ow + j] * inv;
                    for (size_t di = 0; di < window; ++di)
                        for (size_t dj = 0; dj < window; ++dj)
                            gx[(i * window + di) * w + j * window + dj] += g;
                }
        }
    });
    return y;
}

Tensor global_average_pool(const Tensor& x) {
    check_rank(x, 4, "global_average_pool");
    const size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const double inv = 1.0 / static_cast<double>(hw);
    std::vector<double> out(b * c, 0.0);
    for (size_t bc = 0; bc < b * c; ++bc) {
        const double* src = x.values().data() + bc * hw;
        double acc = 0.0;
        for (size_t i = 0; i < hw; ++i) acc += src[i];
        out[bc] = acc * inv;
    }
    Tensor y = Tensor::wrap(make_node({b, c}, std::move(out)));
    record({&x}, y, [xn = x.node(), yn = y.node(), b, c, hw, inv] {
        if (yn->grad.empty() || !xn->tracked()) return;
        xn->ensure_grad();
        for (size_t bc = 0; bc < b * c; ++bc) {
            const double g = yn->grad[bc] * inv;
            double* gx = xn->grad.data() + bc * hw;
            for (size_t i = 0; i < hw; ++i) gx[i] += g;
        }
    });
    return y;
}

// --------------------------------------------------- softmax and friends

Tensor softmax(const Tensor& a, size_t axis) {
    const AxisSpan s = axis_span(a.shape(), axis, "softmax");
    std::vector<double> out(a.numel());
    const double* pa = a.values().data();
    for (size_t o = 0; o < s.outer; ++o)
        for (size_t in = 0; in < s.inner; ++in) {
            const size_t base = o * s.n * s.inner + in;
            double mx = pa[base];
            for (size_t i = 1; i < s.n; ++i)
                mx = std::max(mx, pa[base + i * s.inner]);
            double z = 0.0;
            for (size_t i = 0; i < s.n; ++i) {
                const double e = std::exp(pa[base + i * s.inner] - mx);
                out[base + i * s.inner] = e;
                z += e;
            }
            const double inv = 1.0 / z;
            for (size_t i = 0; i < s.n; ++i) out[base + i * s.inner] *= inv;
        }
    Tensor y = Tensor::wrap(make_node(a.shape(), std::move(out)));
    record({&a}, y, [an = a.node(), yn = y.node(), s] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        for (size_t o = 0; o < s.outer; ++o)
            for (size_t in = 0; in < s.inner; ++in) {
                const size_t base = o * s.n * s.inner + in;
                double dot = 0.0;
                for (size_t i = 0; i < s.n; ++i)
                    dot += yn->grad[base + i * s.inner] * yn->data[base + i * s.inner];
                for (size_t i = 0; i < s.n; ++i) {
                    const size_t idx = base + i * s.inner;
                    an->grad[idx] += yn->data[idx] * (yn->grad[idx] - dot);
                }
            }
    });
    return y;
}

Tensor log_softmax(const Tensor& a, size_t axis) {
    const AxisSpan s = axis_span(a.shape(), axis, "log_softmax");
    std::vector<double> out(a.numel());
    const double* pa = a.values().data();
    for (size_t o = 0; o < s.outer; ++o)
        for (size_t in = 0; in < s.inner; ++in) {
            const size_t base = o * s.n * s.inner + in;
            double mx = pa[base];
            for (size_t i = 1; i < s.n; ++i)
                mx = std::max(mx, pa[base + i * s.inner]);
            double z = 0.0;
            for (size_t i = 0; i < s.n; ++i) z += std::exp(pa[base + i * s.inner] - mx);
            const double lz = std::log(z) + mx;
            for (size_t i = 0; i < s.n; ++i)
                out[base + i * s.inner] = pa[base + i * s.inner] - lz;
        }
    Tensor y = Tensor::wrap(make_node(a.shape(), std::move(out)));
    record({&a}, y, [an = a.node(), yn = y.node(), s] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        for (size_t o = 0; o < s.outer; ++o)
            for (size_t in = 0; in < s.inner; ++in) {
                const size_t base = o * s.n * s.inner + in;
                double gsum = 0.0;
                for (size_t i = 0; i < s.n; ++i) gsum += yn->grad[base + i * s.inner];
                for (size_t i = 0; i < s.n; ++i) {
                    const size_t idx = base + i * s.inner;
                    an->grad[idx] += yn->grad[idx] - std::exp(yn->data[idx]) * gsum;
                }
            }
    });
    return y;
}

Tensor l2_normalize(const Tensor& a, size_t axis) {
    constexpr double kEps = 1e-12;
    const AxisSpan s = axis_span(a.shape(), axis, "l2_normalize");
    std::vector<double> out(a.numel(), 0.0);
    const double* pa = a.values().data();
    for (size_t o = 0; o < s.outer; ++o)
        for (size_t in = 0; in < s.inner; ++in) {
            const size_t base = o * s.n * s.inner + in;
            double sq = 0.0;
            for (size_t i = 0; i < s.n; ++i) {
                const double v = pa[base + i * s.inner];
                sq += v * v;
            }
            const double norm = std::sqrt(sq);
            if (norm < kEps) continue;  // degenerate slice stays zero
            const double inv = 1.0 / norm;
            for (size_t i = 0; i < s.n; ++i)
                out[base + i * s.inner] = pa[base + i * s.inner] * inv;
        }
    Tensor y = Tensor::wrap(make_node(a.shape(), std::move(out)));
    record({&a}, y, [an = a.node(), yn = y.node(), s] {
        if (yn->grad.empty() || !an->tracked()) return;
        an->ensure_grad();
        for (size_t o = 0; o < s.outer; ++o)
            for (size_t in = 0; in < s.inner; ++in) {
                const size_t base = o * s.n * s.inner + in;
                double sq = 0.0;
                for (size_t i = 0; i < s.n; ++i) {
                    const double v = an->data[base + i * s.inner];
                    sq += v * v;
                }
                const double norm = std::sqrt(sq);
                if (norm < kEps) continue;  // zero slice: no gradient
                const double inv = 1.0 / norm;
                double dot = 0.0;
                for (size_t i = 0; i < s.n; ++i) {
                    const size_t idx = base + i * s.inner;
                    dot += yn->grad[idx] * yn->data[idx];
                }
                for (size_t i = 0; i < s.n; ++i) {
                    const size_t idx = base + i * s.inner;
                    an->grad[idx] += (yn->grad[idx] - yn->data[idx] * dot) * inv;
                }
            }
    });
    return y;
}

Tensor scale_by(const Tensor& a, const Tensor& gate) {
    if (gate.numel() != 1)
        throw DimensionError("scale_by: gate must be scalar, got " +
                             shape_str(gate.shape()));
    const double g = gate.values()[0];
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < a.numel(); ++i) out[i] = a.values()[i] * g;
    Tensor y = Tensor::wrap(make_node(a.shape(), std::move(out)));
    record({&a, &gate}, y, [an = a.node(), gn = gate.node(), yn = y.node(), g] {
        if (yn->grad.empty()) return;
        if (an->tracked()) {
            an->ensure_grad();
            for (size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i] * g;
        }
        if (gn->tracked()) {
            gn->ensure_grad();
            double acc = 0.0;
            for (size_t i = 0; i < yn->grad.size(); ++i)
                acc += yn->grad[i] * an->data[i];
            gn->grad[0] += acc;
        }
    });
    return y;
}

// --------------------------------------------------- orthonormal_columns

Tensor orthonormal_columns(size_t rows, size_t cols, uint64_t seed) {
    if (cols == 0 || rows == 0)
        throw DimensionError("orthonormal_columns: dimensions must be positive");
    if (rows < cols)
        throw DimensionError("orthonormal_columns: need rows >= cols, got " +
                             std::to_string(rows) + " < " + std::to_string(cols));
    const size_t d = rows, k = cols;

    // Column-major Gaussian draw; fill order fixed row-by-row for determinism.
    Rng rng(seed);
    std::vector<double> a(d * k);  // a[i + j*d]
    for (size_t i = 0; i < d; ++i)
        for (size_t j = 0; j < k; ++j) a[i + j * d] = rng.normal();

    // Householder vectors, v[j] has length d - j.
    std::vector<std::vector<double>> vs(k);
    std::vector<double> rdiag(k, 0.0);
    for (size_t j = 0; j < k; ++j) {
        double* col = a.data() + j * d;
        double normx = 0.0;
        for (size_t i = j; i < d; ++i) normx += col[i] * col[i];
        normx = std::sqrt(normx);
        const double sign = col[j] >= 0.0 ? 1.0 : -1.0;
        const double alpha = -sign * normx;
        std::vector<double> v(d - j);
        for (size_t i = j; i < d; ++i) v[i - j] = col[i];
        v[0] -= alpha;
        double vnorm = 0.0;
        for (double x : v) vnorm += x * x;
        vnorm = std::sqrt(vnorm);
        rdiag[j] = alpha;
        if (vnorm > 0.0) {
            for (double& x : v) x /= vnorm;
            for (size_t jj = j; jj < k; ++jj) {
                double* c = a.data() + jj * d;
                double dot = 0.0;
                for (size_t i = j; i < d; ++i) dot += v[i - j] * c[i];
                dot *= 2.0;
                for (size_t i = j; i < d; ++i) c[i] -= dot * v[i - j];
            }
            rdiag[j] = a[j + j * d];
        }
        vs[j] = std::move(v);
    }

    // Form Q = H_0 ... H_{k-1} applied to the first k identity columns.
    std::vector<double> q(d * k, 0.0);  // column-major
    for (size_t j = 0; j < k; ++j) q[j + j * d] = 1.0;
    for (size_t jj = k; jj-- > 0;) {
        const std::vector<double>& v = vs[jj];
        if (v.empty()) continue;
        for (size_t col_i = 0; col_i < k; ++col_i) {
            double* c = q.data() + col_i * d;
            double dot = 0.0;
            for (size_t i = jj; i < d; ++i) dot += v[i - jj] * c[i];
            dot *= 2.0;
            for (size_t i = jj; i < d; ++i) c[i] -= dot * v[i - jj];
        }
    }

    // Sign convention: non-negative R diagonal.
    for (size_t j = 0; j < k; ++j)
        if (rdiag[j] < 0.0) {
            double* c = q.data() + j * d;
            for (size_t i = 0; i < d; ++i) c[i] = -c[i];
        }

    // Return row-major d x k.
    std::vector<double> out(d * k);
    for (size_t i = 0; i < d; ++i)
        for (size_t j = 0; j < k; ++j) out[i * k + j] = q[i + j * d];
    return Tensor::from_data({d, k}, std::move(out));
}

}  // namespace eianet
