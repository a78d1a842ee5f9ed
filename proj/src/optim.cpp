#include "chronofuse/optim.hpp"

#include <cmath>

#include "chronofuse/errors.hpp"

namespace chronofuse {

Tensor& ParamRegistry::add(const std::string& name, Tensor t) {
    if (name.empty()) throw ContractError("parameter name must be non-empty");
    if (!t.defined()) throw ContractError("parameter '" + name + "' is undefined");
    auto [it, inserted] = index_.emplace(name, std::move(t));
    if (!inserted) throw ContractError("duplicate parameter name '" + name + "'");
    order_.push_back(name);
    return it->second;
}

Tensor& ParamRegistry::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
}

const Tensor& ParamRegistry::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
}

std::vector<Tensor> ParamRegistry::trainable() const {
    std::vector<Tensor> out;
    for (const auto& n : order_) {
        const Tensor& t = index_.at(n);
        if (t.requires_grad()) out.push_back(t);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> ParamRegistry::entries() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(order_.size());
    for (const auto& n : order_) out.emplace_back(n, index_.at(n));
    return out;
}

std::size_t ParamRegistry::freeze_prefix(const std::string& prefix) {
    std::size_t touched = 0;
    for (const auto& n : order_) {
        if (n.rfind(prefix, 0) != 0) continue;
        index_.at(n).set_requires_grad(false);
        ++touched;
    }
    return touched;
}

std::size_t ParamRegistry::scalar_count(bool trainable_only) const {
    std::size_t total = 0;
    for (const auto& n : order_) {
        const Tensor& t = index_.at(n);
        if (trainable_only && !t.requires_grad()) continue;
        total += t.size();
    }
    return total;
}

void ParamRegistry::adopt(const std::string& prefix, const ParamRegistry& other) {
    for (const auto& n : other.names()) add(prefix + n, other.at(n));
}

AdamW::AdamW(std::vector<Tensor> params, Hyper hyper) : params_(std::move(params)), hyper_(hyper) {
    if (hyper_.beta1 < 0.0 || hyper_.beta1 >= 1.0 || hyper_.beta2 < 0.0 || hyper_.beta2 >= 1.0)
        throw ConfigError("AdamW betas must lie in [0,1)");
    if (hyper_.eps <= 0.0) throw ConfigError("AdamW eps must be positive");
    if (hyper_.weight_decay < 0.0) throw ConfigError("AdamW weight decay must be non-negative");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        if (!p.defined() || !p.requires_grad())
            throw ContractError("AdamW parameters must be defined and require gradients");
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void AdamW::step(double lr) {
    ++step_count_;
    const double b1 = hyper_.beta1, b2 = hyper_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
    const double decay = 1.0 - lr * hyper_.weight_decay;
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        if (!p.has_grad()) throw ContractError("AdamW step with unpopulated gradient");
        const std::vector<double>& g = p.grad();
        double* w = p.data();
        double* m = m_[pi].data();
        double* v = v_[pi].data();
        const std::size_t n = p.size();
        for (std::size_t i = 0; i < n; ++i) {
            w[i] *= decay;
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + hyper_.eps);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

double lr_at(const LrSchedule& s, double step) {
    if (s.peak_lr < 0.0) throw ContractError("lr schedule peak must be non-negative");
    if (!(s.warmup_steps >= 0.0 && s.warmup_steps <= s.total_steps))
        throw ContractError("lr schedule requires 0 <= warmup_steps <= total_steps");
    if (step < 0.0 || step > s.total_steps) throw ContractError("lr schedule step out of range");
    if (s.warmup_steps > 0.0 && step < s.warmup_steps) return s.peak_lr * (step / s.warmup_steps);
    if (s.total_steps == s.warmup_steps) return s.peak_lr;  // degenerate all-warmup schedule
    const double progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps);
    return s.peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
    if (max_norm <= 0.0) throw ConfigError("max_norm must be positive");
    double sq = 0.0;
    for (auto& p : params) {
        if (!p.has_grad()) throw ContractError("clip_global_norm with unpopulated gradient");
        for (const double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& p : params)
            for (auto& g : p.grad_ref()) g *= s;
    }
    return norm;
}

void scale_grads(std::vector<Tensor>& params, double factor) {
    for (auto& p : params) {
        if (!p.has_grad()) throw ContractError("scale_grads with unpopulated gradient");
        for (auto& g : p.grad_ref()) g *= factor;
    }
}

}  // namespace chronofuse
