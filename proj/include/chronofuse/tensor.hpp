#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace chronofuse {

class Rng;

namespace detail {

// One record on the dynamic tape. Holds the forward value, the lazily
// allocated gradient buffer, and a closure that scatters this node's
// gradient into its parents. The parents vector keeps the upstream graph
// alive until backward() runs or the last Tensor handle drops.
struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backprop;

    std::size_t size() const { return value.size(); }
    double* grad_buf();  // allocates zeros on first use
};

}  // namespace detail

// Disables tape recording for the current thread while alive. Forward passes
// under the guard produce plain values; intermediates free as soon as their
// handles drop.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

bool grad_enabled();

// Dense row-major f64 tensor with reverse-mode autodiff. Value-semantic
// handle to a shared tape node; cheap to copy.
class Tensor {
  public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, double fill, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad = false);
    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    std::size_t size() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t rows() const;  // rank-2 only
    std::size_t cols() const;  // rank-2 only

    double* data();
    const double* data() const;
    double item() const;  // size-1 tensors
    double at(std::size_t i) const;
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    void set_requires_grad(bool rg);
    bool has_grad() const;
    const std::vector<double>& grad() const;
    std::vector<double>& grad_ref();
    void zero_grad();
    bool all_finite() const;

    // Copy of the value with no graph history.
    Tensor detached() const;

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

    // Internal: wraps a tape node in a handle. Used by the op implementations.
    static Tensor wrap_node(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }

  private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;
};

// --- differentiable operations -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv1d_strided(const Tensor& x, const Tensor& kernel, std::size_t stride);
Tensor avgpool1d(const Tensor& x, std::size_t window);
Tensor softmax_rows(const Tensor& x);
Tensor softmax_rows_causal(const Tensor& x);  // entry (i,j), j>i masked out
Tensor cross_entropy_rows(const Tensor& logits, const Tensor& onehot_targets);
Tensor mse_masked(const Tensor& xhat, const Tensor& x, const std::vector<std::size_t>& mask_idx);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor gelu(const Tensor& x);
Tensor layernorm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);  // same element count, same order
Tensor mean_rows(const Tensor& x);  // [T,d] -> [d]
Tensor max_rows(const Tensor& x);   // [T,d] -> [d], column-wise max; ties route grad to the first row
Tensor sum(const Tensor& x);        // -> scalar [1]
Tensor concat_rows(const std::vector<Tensor>& xs);
Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);
Tensor concat_cols(const std::vector<Tensor>& xs);
Tensor normalize_rows(const Tensor& x);
Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets);

// Populates .grad on every requires_grad leaf reachable from loss.
void backward(const Tensor& loss);

}  // namespace chronofuse
