#include "chronofuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "chronofuse/errors.hpp"
#include "chronofuse/rng.hpp"

namespace chronofuse {

namespace {

thread_local bool g_grad_enabled = true;

std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

std::size_t shape_numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (const auto e : s) {
        if (e == 0) throw ShapeError("tensor extent must be positive, got shape " + shape_str(s));
        n *= e;
    }
    return n;
}

Tensor new_node(const char* op, std::vector<std::size_t> shape, std::vector<double> value) {
    auto n = std::make_shared<detail::Node>();
    n->op = op;
    n->shape = std::move(shape);
    n->value = std::move(value);
    return Tensor::wrap_node(std::move(n));
}

// Records parents and a backprop closure iff grad mode is on and some input
// needs gradients. All inputs are retained so closures can read their values.
void record(Tensor& out, std::initializer_list<Tensor> parents, std::function<void()> fn) {
    if (!g_grad_enabled) return;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return;
    auto* node = out.node();
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backprop = std::move(fn);
}

void record(Tensor& out, const std::vector<Tensor>& parents, std::function<void()> fn) {
    if (!g_grad_enabled) return;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return;
    auto* node = out.node();
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backprop = std::move(fn);
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
}

// y(m,n) = a(m,k) * b(k,n)
void mm(const double* a, const double* b, double* y, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* yr = y + i * n;
        std::fill(yr, yr + n, 0.0);
        const double* ar = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ar[p];
            const double* br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) yr[j] += av * br[j];
        }
    }
}

// y(m,k) += a(m,n) * b(k,n)^T   (row-dot-row, used for dA = dY * B^T)
void mm_abt_acc(const double* a, const double* b, double* y, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ar = a + i * n;
        double* yr = y + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* br = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += ar[j] * br[j];
            yr[p] += acc;
        }
    }
}

// y(k,n) += a(m,k)^T * b(m,n)   (used for dB = A^T * dY)
void mm_atb_acc(const double* a, const double* b, double* y, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        const double* br = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ar[p];
            if (av == 0.0) continue;
            double* yr = y + p * n;
            for (std::size_t j = 0; j < n; ++j) yr[j] += av * br[j];
        }
    }
}

}  // namespace

namespace detail {

double* Node::grad_buf() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
}

}  // namespace detail

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

// --- Tensor ----------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape, double fill, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->value.assign(n, fill);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    return Tensor(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::randn(std::vector<std::size_t> shape, Rng& rng, double stddev, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    std::vector<double> data(n);
    for (auto& v : data) v = rng.normal(0.0, stddev);
    return from(std::move(shape), std::move(data), requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::size() const { return node_ ? node_->value.size() : 0; }

std::size_t Tensor::rows() const {
    require_rank(*this, 2, "rows()");
    return shape()[0];
}

std::size_t Tensor::cols() const {
    require_rank(*this, 2, "cols()");
    return shape()[1];
}

double* Tensor::data() {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->value.data();
}

const double* Tensor::data() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->value.data();
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() requires a size-1 tensor, got shape " + shape_str(shape()));
    return node_->value[0];
}

double Tensor::at(std::size_t i) const {
    if (i >= size()) throw ShapeError("index out of range");
    return node_->value[i];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    require_rank(*this, 2, "at(r,c)");
    if (r >= shape()[0] || c >= shape()[1]) throw ShapeError("index out of range");
    return node_->value[r * shape()[1] + c];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
    if (!node_) throw ContractError("use of undefined tensor");
    node_->requires_grad = rg;
    if (!rg) node_->grad.clear();
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw ContractError("gradient not populated; run backward() first");
    return node_->grad;
}

std::vector<double>& Tensor::grad_ref() {
    if (!node_) throw ContractError("use of undefined tensor");
    node_->grad_buf();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool Tensor::all_finite() const {
    if (!node_) return true;
    for (const double v : node_->value)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor Tensor::detached() const {
    if (!node_) return Tensor();
    return from(node_->shape, node_->value, false);
}

// --- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul lhs");
    require_rank(b, 2, "matmul rhs");
    const std::size_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> y(m * n);
    mm(a.data(), b.data(), y.data(), m, k, n);
    Tensor out = new_node("matmul", {m, n}, std::move(y));
    auto* so = out.node();
    auto* pa = a.node();
    auto* pb = b.node();
    record(out, {a, b}, [so, pa, pb, m, k, n] {
        const double* g = so->grad.data();
        if (pa->requires_grad) mm_abt_acc(g, pb->value.data(), pa->grad_buf(), m, n, k);
        if (pb->requires_grad) mm_atb_acc(pa->value.data(), g, pb->grad_buf(), m, k, n);
    });
    return out;
}

Tensor conv1d_strided(const Tensor& x, const Tensor& kernel, std::size_t stride) {
    require_rank(x, 2, "conv1d input");
    require_rank(kernel, 3, "conv1d kernel");
    if (stride == 0) throw ContractError("conv1d stride must be positive");
    const std::size_t t_in = x.shape()[0], d_in = x.shape()[1];
    const std::size_t w = kernel.shape()[0], kd_in = kernel.shape()[1], d_out = kernel.shape()[2];
    if (kd_in != d_in)
        throw ShapeError("conv1d kernel input dim " + std::to_string(kd_in) + " != input dim " + std::to_string(d_in));
    if (t_in < w)
        throw DataError("conv1d input length " + std::to_string(t_in) + " shorter than kernel width " +
                        std::to_string(w));
    const std::size_t t_out = (t_in - w) / stride + 1;
    std::vector<double> y(t_out * d_out, 0.0);
    {
        const double* xd = x.data();
        const double* kd = kernel.data();
        for (std::size_t t = 0; t < t_out; ++t) {
            double* yr = y.data() + t * d_out;
            for (std::size_t j = 0; j < w; ++j) {
                const double* xr = xd + (t * stride + j) * d_in;
                const double* kj = kd + j * d_in * d_out;
                for (std::size_t i = 0; i < d_in; ++i) {
                    const double xv = xr[i];
                    const double* kr = kj + i * d_out;
                    for (std::size_t o = 0; o < d_out; ++o) yr[o] += xv * kr[o];
                }
            }
        }
    }
    Tensor out = new_node("conv1d", {t_out, d_out}, std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    auto* pk = kernel.node();
    record(out, {x, kernel}, [so, px, pk, t_out, d_in, d_out, w, stride] {
        const double* g = so->grad.data();
        const double* xd = px->value.data();
        const double* kd = pk->value.data();
        double* gx = px->requires_grad ? px->grad_buf() : nullptr;
        double* gk = pk->requires_grad ? pk->grad_buf() : nullptr;
        for (std::size_t t = 0; t < t_out; ++t) {
            const double* gr = g + t * d_out;
            for (std::size_t j = 0; j < w; ++j) {
                const std::size_t row = t * stride + j;
                for (std::size_t i = 0; i < d_in; ++i) {
                    const double* kr = kd + (j * d_in + i) * d_out;
                    if (gx) {
                        double acc = 0.0;
                        for (std::size_t o = 0; o < d_out; ++o) acc += gr[o] * kr[o];
                        gx[row * d_in + i] += acc;
                    }
                    if (gk) {
                        const double xv = xd[row * d_in + i];
                        double* gkr = gk + (j * d_in + i) * d_out;
                        for (std::size_t o = 0; o < d_out; ++o) gkr[o] += xv * gr[o];
                    }
                }
            }
        }
    });
    return out;
}

Tensor avgpool1d(const Tensor& x, std::size_t window) {
    require_rank(x, 2, "avgpool1d input");
    if (window == 0) throw ContractError("avgpool1d window must be positive");
    const std::size_t t_in = x.shape()[0], d = x.shape()[1];
    if (t_in < window)
        throw DataError("avgpool1d input length " + std::to_string(t_in) + " shorter than window " +
                        std::to_string(window));
    const std::size_t t_out = t_in / window;
    std::vector<double> y(t_out * d, 0.0);
    const double inv = 1.0 / static_cast<double>(window);
    const double* xd = x.data();
    for (std::size_t t = 0; t < t_out; ++t) {
        double* yr = y.data() + t * d;
        for (std::size_t j = 0; j < window; ++j) {
            const double* xr = xd + (t * window + j) * d;
            for (std::size_t i = 0; i < d; ++i) yr[i] += xr[i];
        }
        for (std::size_t i = 0; i < d; ++i) yr[i] *= inv;
    }
    Tensor out = new_node("avgpool1d", {t_out, d}, std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    record(out, {x}, [so, px, t_out, d, window, inv] {
        const double* g = so->grad.data();
        double* gx = px->grad_buf();
        for (std::size_t t = 0; t < t_out; ++t) {
            const double* gr = g + t * d;
            for (std::size_t j = 0; j < window; ++j) {
                double* gxr = gx + (t * window + j) * d;
                for (std::size_t i = 0; i < d; ++i) gxr[i] += gr[i] * inv;
            }
        }
    });
    return out;
}

namespace {

Tensor softmax_impl(const Tensor& x, bool causal) {
    require_rank(x, 2, "softmax input");
    const std::size_t n = x.shape()[0], c = x.shape()[1];
    if (causal && n != c) throw ShapeError("causal softmax requires a square matrix");
    std::vector<double> y(n * c, 0.0);
    const double* xd = x.data();
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = xd + r * c;
        double* yr = y.data() + r * c;
        const std::size_t lim = causal ? r + 1 : c;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < lim; ++j) {
            if (!std::isfinite(xr[j])) throw NumericError("softmax input contains a non-finite value");
            mx = std::max(mx, xr[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < lim; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            z += yr[j];
        }
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < lim; ++j) yr[j] *= inv;
    }
    Tensor out = new_node(causal ? "softmax_causal" : "softmax", {n, c}, std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    record(out, {x}, [so, px, n, c, causal] {
        const double* g = so->grad.data();
        const double* yv = so->value.data();
        double* gx = px->grad_buf();
        for (std::size_t r = 0; r < n; ++r) {
            const double* gr = g + r * c;
            const double* yr = yv + r * c;
            double* gxr = gx + r * c;
            const std::size_t lim = causal ? r + 1 : c;
            double dot = 0.0;
            for (std::size_t j = 0; j < lim; ++j) dot += gr[j] * yr[j];
            for (std::size_t j = 0; j < lim; ++j) gxr[j] += yr[j] * (gr[j] - dot);
        }
    });
    return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& x) { return softmax_impl(x, false); }
Tensor softmax_rows_causal(const Tensor& x) { return softmax_impl(x, true); }

Tensor cross_entropy_rows(const Tensor& logits, const Tensor& onehot_targets) {
    require_rank(logits, 2, "cross_entropy logits");
    require_rank(onehot_targets, 2, "cross_entropy targets");
    if (logits.shape() != onehot_targets.shape())
        throw ShapeError("cross_entropy shape mismatch: " + shape_str(logits.shape()) + " vs " +
                         shape_str(onehot_targets.shape()));
    const std::size_t n = logits.shape()[0], c = logits.shape()[1];
    std::vector<std::size_t> target_idx(n);
    const double* td = onehot_targets.data();
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t ones = 0, idx = 0;
        for (std::size_t j = 0; j < c; ++j) {
            const double v = td[r * c + j];
            if (v == 1.0) {
                ones++;
                idx = j;
            } else if (v != 0.0) {
                throw ContractError("cross_entropy target row " + std::to_string(r) + " is not one-hot");
            }
        }
        if (ones != 1) throw ContractError("cross_entropy target row " + std::to_string(r) + " is not one-hot");
        target_idx[r] = idx;
    }
    const double* xd = logits.data();
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = xd + r * c;
        double mx = xr[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        if (!std::isfinite(mx)) throw NumericError("cross_entropy logits contain a non-finite value");
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(xr[j] - mx);
        loss += mx + std::log(z) - xr[target_idx[r]];
    }
    loss /= static_cast<double>(n);
    Tensor out = new_node("cross_entropy", {1}, {loss});
    auto* so = out.node();
    auto* px = logits.node();
    record(out, {logits, onehot_targets}, [so, px, n, c, target_idx = std::move(target_idx)] {
        if (!px->requires_grad) return;
        const double g = so->grad[0] / static_cast<double>(n);
        const double* xd = px->value.data();
        double* gx = px->grad_buf();
        for (std::size_t r = 0; r < n; ++r) {
            const double* xr = xd + r * c;
            double* gxr = gx + r * c;
            double mx = xr[0];
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
            double z = 0.0;
            for (std::size_t j = 0; j < c; ++j) z += std::exp(xr[j] - mx);
            const double inv = 1.0 / z;
            for (std::size_t j = 0; j < c; ++j) gxr[j] += g * std::exp(xr[j] - mx) * inv;
            gxr[target_idx[r]] -= g;
        }
    });
    return out;
}

Tensor mse_masked(const Tensor& xhat, const Tensor& x, const std::vector<std::size_t>& mask_idx) {
    require_rank(xhat, 2, "mse_masked prediction");
    require_rank(x, 2, "mse_masked target");
    if (xhat.shape() != x.shape())
        throw ShapeError("mse_masked shape mismatch: " + shape_str(xhat.shape()) + " vs " + shape_str(x.shape()));
    if (mask_idx.empty()) throw ContractError("mse_masked requires a non-empty mask");
    const std::size_t t = x.shape()[0], d = x.shape()[1];
    {
        std::unordered_set<std::size_t> seen;
        for (const auto i : mask_idx) {
            if (i >= t) throw ContractError("mse_masked index " + std::to_string(i) + " out of range");
            if (!seen.insert(i).second) throw ContractError("mse_masked index set has duplicates");
        }
    }
    const double* a = xhat.data();
    const double* b = x.data();
    double loss = 0.0;
    for (const auto r : mask_idx) {
        const double* ar = a + r * d;
        const double* br = b + r * d;
        for (std::size_t j = 0; j < d; ++j) {
            const double e = ar[j] - br[j];
            loss += e * e;
        }
    }
    loss /= static_cast<double>(mask_idx.size());
    Tensor out = new_node("mse_masked", {1}, {loss});
    auto* so = out.node();
    auto* pa = xhat.node();
    auto* pb = x.node();
    record(out, {xhat, x}, [so, pa, pb, d, mask_idx] {
        const double g = 2.0 * so->grad[0] / static_cast<double>(mask_idx.size());
        const double* a = pa->value.data();
        const double* b = pb->value.data();
        double* ga = pa->requires_grad ? pa->grad_buf() : nullptr;
        double* gb = pb->requires_grad ? pb->grad_buf() : nullptr;
        for (const auto r : mask_idx) {
            for (std::size_t j = 0; j < d; ++j) {
                const double e = g * (a[r * d + j] - b[r * d + j]);
                if (ga) ga[r * d + j] += e;
                if (gb) gb[r * d + j] -= e;
            }
        }
    });
    return out;
}

namespace {

enum class EwKind { Add, Sub, Mul };

Tensor elementwise(const Tensor& a, const Tensor& b, EwKind kind, const char* name) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(name) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::size_t n = a.size();
    std::vector<double> y(n);
    const double* av = a.data();
    const double* bv = b.data();
    switch (kind) {
        case EwKind::Add:
            for (std::size_t i = 0; i < n; ++i) y[i] = av[i] + bv[i];
            break;
        case EwKind::Sub:
            for (std::size_t i = 0; i < n; ++i) y[i] = av[i] - bv[i];
            break;
        case EwKind::Mul:
            for (std::size_t i = 0; i < n; ++i) y[i] = av[i] * bv[i];
            break;
    }
    Tensor out = new_node(name, a.shape(), std::move(y));
    auto* so = out.node();
    auto* pa = a.node();
    auto* pb = b.node();
    record(out, {a, b}, [so, pa, pb, n, kind] {
        const double* g = so->grad.data();
        if (pa->requires_grad) {
            double* ga = pa->grad_buf();
            if (kind == EwKind::Mul) {
                const double* bv = pb->value.data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
            } else {
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
        }
        if (pb->requires_grad) {
            double* gb = pb->grad_buf();
            switch (kind) {
                case EwKind::Add:
                    for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                    break;
                case EwKind::Sub:
                    for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                    break;
                case EwKind::Mul: {
                    const double* av = pa->value.data();
                    for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
                    break;
                }
            }
        }
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Mul, "mul"); }

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    require_rank(x, 2, "add_rowvec input");
    require_rank(v, 1, "add_rowvec vector");
    const std::size_t t = x.shape()[0], d = x.shape()[1];
    if (v.shape()[0] != d) throw ShapeError("add_rowvec dim mismatch");
    std::vector<double> y(t * d);
    const double* xd = x.data();
    const double* vd = v.data();
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t j = 0; j < d; ++j) y[r * d + j] = xd[r * d + j] + vd[j];
    Tensor out = new_node("add_rowvec", {t, d}, std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    auto* pv = v.node();
    record(out, {x, v}, [so, px, pv, t, d] {
        const double* g = so->grad.data();
        if (px->requires_grad) {
            double* gx = px->grad_buf();
            for (std::size_t i = 0; i < t * d; ++i) gx[i] += g[i];
        }
        if (pv->requires_grad) {
            double* gv = pv->grad_buf();
            for (std::size_t r = 0; r < t; ++r)
                for (std::size_t j = 0; j < d; ++j) gv[j] += g[r * d + j];
        }
    });
    return out;
}

Tensor scale(const Tensor& x, double c) {
    const std::size_t n = x.size();
    std::vector<double> y(n);
    const double* xd = x.data();
    for (std::size_t i = 0; i < n; ++i) y[i] = xd[i] * c;
    Tensor out = new_node("scale", x.shape(), std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    record(out, {x}, [so, px, n, c] {
        const double* g = so->grad.data();
        double* gx = px->grad_buf();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * c;
    });
    return out;
}

Tensor gelu(const Tensor& x) {
    const std::size_t n = x.size();
    std::vector<double> y(n);
    const double* xd = x.data();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < n; ++i) y[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * inv_sqrt2));
    Tensor out = new_node("gelu", x.shape(), std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    record(out, {x}, [so, px, n] {
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        const double* g = so->grad.data();
        const double* xv = px->value.data();
        double* gx = px->grad_buf();
        for (std::size_t i = 0; i < n; ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(xv[i] * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv[i] * xv[i]);
            gx[i] += g[i] * (cdf + xv[i] * pdf);
        }
    });
    return out;
}

Tensor layernorm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_rank(x, 2, "layernorm input");
    require_rank(gain, 1, "layernorm gain");
    require_rank(bias, 1, "layernorm bias");
    const std::size_t t = x.shape()[0], d = x.shape()[1];
    if (gain.shape()[0] != d || bias.shape()[0] != d) throw ShapeError("layernorm parameter dim mismatch");
    std::vector<double> y(t * d);
    std::vector<double> xhat(t * d);
    std::vector<double> inv_std(t);
    const double* xd = x.data();
    const double* gd = gain.data();
    const double* bd = bias.data();
    for (std::size_t r = 0; r < t; ++r) {
        const double* xr = xd + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gd[j] + bd[j];
        }
    }
    Tensor out = new_node("layernorm", {t, d}, std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    auto* pg = gain.node();
    auto* pb = bias.node();
    record(out, {x, gain, bias},
           [so, px, pg, pb, t, d, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
               const double* g = so->grad.data();
               const double* gd = pg->value.data();
               double* gx = px->requires_grad ? px->grad_buf() : nullptr;
               double* gg = pg->requires_grad ? pg->grad_buf() : nullptr;
               double* gb = pb->requires_grad ? pb->grad_buf() : nullptr;
               for (std::size_t r = 0; r < t; ++r) {
                   const double* gr = g + r * d;
                   const double* hr = xhat.data() + r * d;
                   if (gg || gb) {
                       for (std::size_t j = 0; j < d; ++j) {
                           if (gg) gg[j] += gr[j] * hr[j];
                           if (gb) gb[j] += gr[j];
                       }
                   }
                   if (gx) {
                       double sum_gy = 0.0, sum_gyh = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                           const double gy = gr[j] * gd[j];
                           sum_gy += gy;
                           sum_gyh += gy * hr[j];
                       }
                       const double inv_d = 1.0 / static_cast<double>(d);
                       double* gxr = gx + r * d;
                       for (std::size_t j = 0; j < d; ++j) {
                           const double gy = gr[j] * gd[j];
                           gxr[j] += inv_std[r] * (gy - sum_gy * inv_d - hr[j] * sum_gyh * inv_d);
                       }
                   }
               }
           });
    return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
    require_rank(table, 2, "embedding table");
    const std::size_t v = table.shape()[0], d = table.shape()[1];
    for (const auto id : ids)
        if (id >= v) throw ContractError("embedding id " + std::to_string(id) + " out of vocabulary");
    const std::size_t n = ids.size();
    if (n == 0) throw ContractError("embedding lookup requires at least one id");
    std::vector<double> y(n * d);
    const double* td = table.data();
    for (std::size_t r = 0; r < n; ++r) std::memcpy(y.data() + r * d, td + ids[r] * d, d * sizeof(double));
    Tensor out = new_node("embedding", {n, d}, std::move(y));
    auto* so = out.node();
    auto* pt = table.node();
    record(out, {table}, [so, pt, d, ids] {
        const double* g = so->grad.data();
        double* gt = pt->grad_buf();
        for (std::size_t r = 0; r < ids.size(); ++r)
            for (std::size_t j = 0; j < d; ++j) gt[ids[r] * d + j] += g[r * d + j];
    });
    return out;
}

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
    std::size_t count = 1;
    for (const auto e : shape) count *= e;
    if (shape.empty() || count != x.size())
        throw ShapeError("reshape to " + shape_str(shape) + " does not preserve " + std::to_string(x.size()) +
                         " elements");
    const double* xd = x.data();
    Tensor out = new_node("reshape", std::move(shape), std::vector<double>(xd, xd + x.size()));
    auto* so = out.node();
    auto* px = x.node();
    const std::size_t n = x.size();
    record(out, {x}, [so, px, n] {
        const double* g = so->grad.data();
        double* gx = px->grad_buf();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
    });
    return out;
}

Tensor transpose(const Tensor& x) {
    require_rank(x, 2, "transpose input");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<double> y(r * c);
    const double* xd = x.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) y[j * r + i] = xd[i * c + j];
    Tensor out = new_node("transpose", {c, r}, std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    record(out, {x}, [so, px, r, c] {
        const double* g = so->grad.data();
        double* gx = px->grad_buf();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
    return out;
}

Tensor max_rows(const Tensor& x) {
    require_rank(x, 2, "max_rows input");
    const std::size_t t = x.shape()[0], d = x.shape()[1];
    if (t == 0) throw ContractError("max_rows requires at least one row");
    std::vector<double> y(d);
    std::vector<std::size_t> arg(d, 0);
    const double* xd = x.data();
    for (std::size_t j = 0; j < d; ++j) y[j] = xd[j];
    for (std::size_t r = 1; r < t; ++r)
        for (std::size_t j = 0; j < d; ++j)
            if (xd[r * d + j] > y[j]) {
                y[j] = xd[r * d + j];
                arg[j] = r;
            }
    Tensor out = new_node("max_rows", {d}, std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    record(out, {x}, [so, px, d, arg = std::move(arg)] {
        const double* g = so->grad.data();
        double* gx = px->grad_buf();
        for (std::size_t j = 0; j < d; ++j) gx[arg[j] * d + j] += g[j];
    });
    return out;
}

Tensor mean_rows(const Tensor& x) {
    require_rank(x, 2, "mean_rows input");
    const std::size_t t = x.shape()[0], d = x.shape()[1];
    std::vector<double> y(d, 0.0);
    const double* xd = x.data();
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t j = 0; j < d; ++j) y[j] += xd[r * d + j];
    const double inv = 1.0 / static_cast<double>(t);
    for (std::size_t j = 0; j < d; ++j) y[j] *= inv;
    Tensor out = new_node("mean_rows", {d}, std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    record(out, {x}, [so, px, t, d, inv] {
        const double* g = so->grad.data();
        double* gx = px->grad_buf();
        for (std::size_t r = 0; r < t; ++r)
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[j] * inv;
    });
    return out;
}

Tensor sum(const Tensor& x) {
    const std::size_t n = x.size();
    const double* xd = x.data();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += xd[i];
    Tensor out = new_node("sum", {1}, {s});
    auto* so = out.node();
    auto* px = x.node();
    record(out, {x}, [so, px, n] {
        const double g = so->grad[0];
        double* gx = px->grad_buf();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
    return out;
}

namespace {

// Accepts rank-1 [d] as a single row alongside rank-2 [t,d].
std::pair<std::size_t, std::size_t> row_block_dims(const Tensor& t) {
    if (t.rank() == 1) return {1, t.shape()[0]};
    if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
    throw ShapeError("concat_rows accepts rank-1 or rank-2 tensors");
}

}  // namespace

Tensor concat_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("concat_rows requires at least one tensor");
    std::size_t total = 0, d = 0;
    for (const auto& x : xs) {
        const auto [r, c] = row_block_dims(x);
        if (d == 0)
            d = c;
        else if (c != d)
            throw ShapeError("concat_rows column mismatch");
        total += r;
    }
    std::vector<double> y(total * d);
    std::size_t off = 0;
    for (const auto& x : xs) {
        std::memcpy(y.data() + off, x.data(), x.size() * sizeof(double));
        off += x.size();
    }
    Tensor out = new_node("concat_rows", {total, d}, std::move(y));
    auto* so = out.node();
    std::vector<detail::Node*> pnodes;
    pnodes.reserve(xs.size());
    for (const auto& x : xs) pnodes.push_back(x.node());
    record(out, xs, [so, pnodes] {
        const double* g = so->grad.data();
        std::size_t off = 0;
        for (auto* p : pnodes) {
            const std::size_t n = p->value.size();
            if (p->requires_grad) {
                double* gp = p->grad_buf();
                for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
            }
            off += n;
        }
    });
    return out;
}

Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    require_rank(x, 2, "slice_rows input");
    const std::size_t t = x.shape()[0], d = x.shape()[1];
    if (r0 >= r1 || r1 > t) throw ShapeError("slice_rows range invalid");
    const std::size_t n = r1 - r0;
    std::vector<double> y(x.data() + r0 * d, x.data() + r1 * d);
    Tensor out = new_node("slice_rows", {n, d}, std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    record(out, {x}, [so, px, r0, n, d] {
        const double* g = so->grad.data();
        double* gx = px->grad_buf();
        for (std::size_t i = 0; i < n * d; ++i) gx[r0 * d + i] += g[i];
    });
    return out;
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    require_rank(x, 2, "slice_cols input");
    const std::size_t t = x.shape()[0], d = x.shape()[1];
    if (c0 >= c1 || c1 > d) throw ShapeError("slice_cols range invalid");
    const std::size_t n = c1 - c0;
    std::vector<double> y(t * n);
    const double* xd = x.data();
    for (std::size_t r = 0; r < t; ++r) std::memcpy(y.data() + r * n, xd + r * d + c0, n * sizeof(double));
    Tensor out = new_node("slice_cols", {t, n}, std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    record(out, {x}, [so, px, t, d, c0, n] {
        const double* g = so->grad.data();
        double* gx = px->grad_buf();
        for (std::size_t r = 0; r < t; ++r)
            for (std::size_t j = 0; j < n; ++j) gx[r * d + c0 + j] += g[r * n + j];
    });
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("concat_cols requires at least one tensor");
    const std::size_t t = xs.front().rank() == 2 ? xs.front().shape()[0] : 0;
    std::size_t d = 0;
    for (const auto& x : xs) {
        require_rank(x, 2, "concat_cols input");
        if (x.shape()[0] != t) throw ShapeError("concat_cols row mismatch");
        d += x.shape()[1];
    }
    std::vector<double> y(t * d);
    std::size_t off = 0;
    for (const auto& x : xs) {
        const std::size_t c = x.shape()[1];
        const double* xd = x.data();
        for (std::size_t r = 0; r < t; ++r) std::memcpy(y.data() + r * d + off, xd + r * c, c * sizeof(double));
        off += c;
    }
    Tensor out = new_node("concat_cols", {t, d}, std::move(y));
    auto* so = out.node();
    std::vector<detail::Node*> pnodes;
    for (const auto& x : xs) pnodes.push_back(x.node());
    record(out, xs, [so, pnodes, t, d] {
        const double* g = so->grad.data();
        std::size_t off = 0;
        for (auto* p : pnodes) {
            const std::size_t c = p->shape[1];
            if (p->requires_grad) {
                double* gp = p->grad_buf();
                for (std::size_t r = 0; r < t; ++r)
                    for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += g[r * d + off + j];
            }
            off += c;
        }
    });
    return out;
}

Tensor normalize_rows(const Tensor& x) {
    require_rank(x, 2, "normalize_rows input");
    const std::size_t t = x.shape()[0], d = x.shape()[1];
    std::vector<double> y(t * d);
    std::vector<double> inv_norm(t);
    const double* xd = x.data();
    for (std::size_t r = 0; r < t; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += xd[r * d + j] * xd[r * d + j];
        const double norm = std::max(std::sqrt(s), 1e-12);
        inv_norm[r] = 1.0 / norm;
        for (std::size_t j = 0; j < d; ++j) y[r * d + j] = xd[r * d + j] * inv_norm[r];
    }
    Tensor out = new_node("normalize_rows", {t, d}, std::move(y));
    auto* so = out.node();
    auto* px = x.node();
    record(out, {x}, [so, px, t, d, inv_norm = std::move(inv_norm)] {
        const double* g = so->grad.data();
        const double* yv = so->value.data();
        double* gx = px->grad_buf();
        for (std::size_t r = 0; r < t; ++r) {
            const double* gr = g + r * d;
            const double* yr = yv + r * d;
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv_norm[r] * (gr[j] - yr[j] * dot);
        }
    });
    return out;
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
    if (logits.rank() != 1) throw ShapeError("bce_with_logits expects a rank-1 logit vector");
    const std::size_t n = logits.shape()[0];
    if (targets.size() != n) throw ShapeError("bce_with_logits target count mismatch");
    for (const double t : targets)
        if (t < 0.0 || t > 1.0) throw ContractError("bce_with_logits targets must lie in [0,1]");
    const double* z = logits.data();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(z[i])) throw NumericError("bce_with_logits logit is non-finite");
        loss += std::max(z[i], 0.0) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
    }
    loss /= static_cast<double>(n);
    Tensor out = new_node("bce_with_logits", {1}, {loss});
    auto* so = out.node();
    auto* px = logits.node();
    record(out, {logits}, [so, px, n, targets] {
        const double g = so->grad[0] / static_cast<double>(n);
        const double* z = px->value.data();
        double* gx = px->grad_buf();
        for (std::size_t i = 0; i < n; ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-z[i]));
            gx[i] += g * (sig - targets[i]);
        }
    });
    return out;
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw ContractError("backward on undefined tensor");
    if (loss.size() != 1) throw ContractError("backward root must be a scalar");
    auto* root = loss.node();
    if (!root->requires_grad) return;  // nothing reachable needs gradients

    // Post-order DFS over parents; reversing yields root-first order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    struct Frame {
        detail::Node* n;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    visited.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            detail::Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    root->grad_buf()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop();
    }
}

}  // namespace chronofuse
