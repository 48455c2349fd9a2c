#pragma once
// Minimal dense-tensor math with reverse-mode autodiff on 64-bit floats.
// Tensors are 1-D or 2-D row-major; a Tape records primitive ops and
// replays them backward. Only the shapes and broadcasts the encoder,
// adapters, and fusion layers need are implemented.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <vector>

namespace klm::nn {

class Node {
  public:
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily, same length as value
    bool requires_grad = false;

    std::size_t size() const { return value.size(); }
    std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1]; }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
    void zero_grad() { grad.assign(value.size(), 0.0); }
};

using TensorPtr = std::shared_ptr<Node>;

TensorPtr make_tensor(std::vector<std::size_t> shape, bool requires_grad = false);
TensorPtr from_values(std::vector<std::size_t> shape, std::vector<double> values,
                      bool requires_grad = false);
TensorPtr randn(std::vector<std::size_t> shape, double stddev, std::mt19937_64& rng,
                bool requires_grad = true);
TensorPtr identity_matrix(std::size_t n, bool requires_grad = true);

class Tape {
  public:
    // Registers an op output and its backward closure; returns `out`.
    TensorPtr record(TensorPtr out, std::function<void()> backward);
    // Zeroes the grads of all recorded outputs, seeds d(loss)=1, replays
    // backward. Leaf grads accumulate across calls.
    void backward(const TensorPtr& loss);
    std::size_t op_count() const { return steps_.size(); }

  private:
    struct Step {
        TensorPtr out;
        std::function<void()> back;
    };
    std::vector<Step> steps_;
};

// --- primitive ops (forward + recorded backward) ---
TensorPtr add(Tape& t, const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(Tape& t, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Tape& t, const TensorPtr& a, const TensorPtr& b);  // elementwise
TensorPtr scale(Tape& t, const TensorPtr& a, double c);
TensorPtr add_rowvec(Tape& t, const TensorPtr& m, const TensorPtr& v);  // [r×c] + [c]
TensorPtr matmul(Tape& t, const TensorPtr& a, const TensorPtr& b);
TensorPtr transpose(Tape& t, const TensorPtr& a);
TensorPtr relu(Tape& t, const TensorPtr& a);
TensorPtr gelu(Tape& t, const TensorPtr& a);  // tanh approximation
TensorPtr sigmoid(Tape& t, const TensorPtr& a);
TensorPtr softmax(Tape& t, const TensorPtr& a, int axis = -1);
TensorPtr layer_norm(Tape& t, const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                     double eps = 1e-5);
TensorPtr embedding(Tape& t, const TensorPtr& table, const std::vector<int32_t>& ids);
TensorPtr dropout(Tape& t, const TensorPtr& a, double p, std::mt19937_64& rng, bool training);
TensorPtr row_sum(Tape& t, const TensorPtr& a);                             // [r×c] -> [r×1]
TensorPtr col_broadcast_mul(Tape& t, const TensorPtr& m, const TensorPtr& v);  // [r×c] * [r×1]
TensorPtr concat_cols(Tape& t, const std::vector<TensorPtr>& parts);
TensorPtr concat_rows(Tape& t, const std::vector<TensorPtr>& parts);
TensorPtr slice_rows(Tape& t, const TensorPtr& a, std::size_t start, std::size_t count);
TensorPtr slice_cols(Tape& t, const TensorPtr& a, std::size_t start, std::size_t count);
TensorPtr sum_all(Tape& t, const TensorPtr& a);   // -> scalar [1]
TensorPtr mean_all(Tape& t, const TensorPtr& a);  // -> scalar [1]

// Mean over rows of -log softmax(logits)[label].
TensorPtr cross_entropy_loss(Tape& t, const TensorPtr& logits, const std::vector<int32_t>& labels);
// Multi-label loss: mean over rows of summed per-class sigmoid BCE.
TensorPtr bce_with_logits(Tape& t, const TensorPtr& logits, const std::vector<double>& targets);

// Central finite-difference oracle: returns the max over all elements of
// all params of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
double grad_check(const std::function<TensorPtr(Tape&)>& f, const std::vector<TensorPtr>& params,
                  double fd_step = 1e-5);

}  // namespace klm::nn
