#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "chronofuse/tensor.hpp"

namespace chronofuse {

// Named parameter collection. Insertion order is preserved so checkpoints
// and optimizer state are reproducible byte-for-byte across runs.
class ParamRegistry {
  public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::string>& names() const { return order_; }
    std::size_t size() const { return order_.size(); }

    // Tensors with requires_grad set, in insertion order.
    std::vector<Tensor> trainable() const;
    std::vector<std::pair<std::string, Tensor>> entries() const;

    // Clears requires_grad (and any stale grad) on every parameter whose
    // name starts with the prefix. Returns how many were touched.
    std::size_t freeze_prefix(const std::string& prefix);

    std::size_t scalar_count(bool trainable_only = false) const;

    // Adopts every entry of `other` under `prefix` + its name.
    void adopt(const std::string& prefix, const ParamRegistry& other);

  private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> index_;
};

// AdamW with decoupled weight decay. The decay is applied to the parameter
// value before the moment update, i.e. param *= (1 - lr*wd) first, then the
// bias-corrected Adam step subtracts lr * m_hat / (sqrt(v_hat) + eps).
class AdamW {
  public:
    struct Hyper {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double weight_decay = 0.0;
        double eps = 1e-8;
    };

    AdamW(std::vector<Tensor> params, Hyper hyper);

    // One update using the supplied learning rate. Every registered
    // parameter must have a populated gradient buffer.
    void step(double lr);

    void zero_grad();
    std::size_t step_count() const { return step_count_; }
    const Hyper& hyper() const { return hyper_; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    Hyper hyper_;
    std::size_t step_count_ = 0;
};

// Linear warmup to peak_lr over warmup_steps, then cosine decay to zero at
// total_steps. Step counts are doubles so fractional warmup (e.g. a tenth
// of an epoch) keeps its exact value.
struct LrSchedule {
    double peak_lr = 0.0;
    double warmup_steps = 0.0;
    double total_steps = 0.0;
};

double lr_at(const LrSchedule& schedule, double step);

// Scales gradients so their global L2 norm does not exceed max_norm.
// Returns the pre-clip norm. Direction is preserved.
double clip_global_norm(std::vector<Tensor>& params, double max_norm);

// Multiplies every populated gradient by factor (used to divide summed
// micro-batch gradients by the accumulation count before a step).
void scale_grads(std::vector<Tensor>& params, double factor);

}  // namespace chronofuse
