#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace eianet {

using Shape = std::vector<size_t>;

std::string shape_str(const Shape& s);
size_t shape_numel(const Shape& s);

// Ordered record of executed differentiable ops; replaying backward visits
// them in exact reverse execution order, and a tape is consumed exactly once.
struct TapeCore {
    std::vector<std::function<void()>> steps;
    bool consumed = false;
};

// Dense f64 buffer plus the bookkeeping reverse mode needs. Values are never
// mutated after an op produces them; parameter updates go through
// Tensor::apply_update outside any tape.
struct TensorData {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;       // empty until first use
    std::weak_ptr<TapeCore> tape;   // tape that recorded the producing op
    bool on_tape = false;

    bool tracked() const { return requires_grad || on_tape; }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    size_t rank() const { return d_->shape.size(); }
    size_t numel() const { return d_->data.size(); }
    size_t dim(size_t i) const { return d_->shape[i]; }

    const std::vector<double>& values() const { return d_->data; }
    double value_at(size_t i) const { return d_->data[i]; }
    double item() const;  // scalar only

    bool requires_grad() const { return d_->requires_grad; }
    bool has_grad() const { return !d_->grad.empty(); }
    const std::vector<double>& grad() const { return d_->grad; }
    void zero_grad() { d_->grad.assign(d_->data.size(), 0.0); }

    // In-place parameter update (optimizer use only; recorded values stay
    // immutable because recording tensors are never updated mid-tape).
    void apply_update(const std::vector<double>& delta);
    void set_values(const std::vector<double>& values);

    std::shared_ptr<TensorData> node() const { return d_; }

    static Tensor wrap(std::shared_ptr<TensorData> d) {
        Tensor t;
        t.d_ = std::move(d);
        return t;
    }

private:
    std::shared_ptr<TensorData> d_;
};

// RAII recording scope. While a Tape is alive, every differentiable op whose
// inputs are tracked records a backward step on it. No active tape means
// forward-only evaluation.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool consumed() const { return core_->consumed; }
    size_t size() const { return core_->steps.size(); }
    const std::shared_ptr<TapeCore>& core() const { return core_; }

    static Tape* active();

private:
    std::shared_ptr<TapeCore> core_;
    Tape* previous_ = nullptr;
};

// Populates grad for every requires_grad tensor reachable from loss.
// Errors: non-scalar loss, loss without a live tape, or a reused tape.
void backward(const Tensor& loss);

// ---- elementwise / reduction ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
// log with an optional floor: entries are clamped below at `floor` before
// the log (gradient is zero on clamped entries). floor = 0 means plain log.
Tensor log(const Tensor& a, double floor = 0.0);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);                   // 2-D
Tensor batch_transpose(const Tensor& a);             // B x m x n -> B x n x m
Tensor gather_rows(const Tensor& a, const std::vector<size_t>& rows);  // 2-D
Tensor tile_rows(const Tensor& row, size_t count);   // [K] or 1 x K -> count x K

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);        // m x k, k x n
Tensor batch_matmul(const Tensor& a, const Tensor& b);  // B x m x k, B x k x n

// ---- neural net ----
Tensor conv2d(const Tensor& x, const Tensor& w, size_t stride, size_t padding);
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);  // B x C x H x W + [C]
Tensor add_row_bias(const Tensor& x, const Tensor& bias);      // B x d + [d]
Tensor avg_pool2d(const Tensor& x, size_t window);
Tensor global_average_pool(const Tensor& x);  // B x C x H x W -> B x C
Tensor softmax(const Tensor& a, size_t axis);
Tensor log_softmax(const Tensor& a, size_t axis);
Tensor l2_normalize(const Tensor& a, size_t axis);
// Broadcast multiply by a scalar tensor (the attention residual gate).
Tensor scale_by(const Tensor& a, const Tensor& gate);

// Seeded random matrix with exactly orthonormal columns (thin Householder QR
// of a Gaussian draw, sign-fixed via a non-negative R diagonal). Requires
// rows >= cols. Not differentiable; used for classifier construction.
Tensor orthonormal_columns(size_t rows, size_t cols, uint64_t seed);

}  // namespace eianet
