#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "chronofuse/tensor.hpp"

// Central finite-difference oracle for reverse-mode gradients.
//
// `fn` rebuilds the scalar loss from the current leaf values each call.
// Returns the max over all leaf entries of
//     |ad - fd| / max(|ad|, |fd|, floor)
// where ad is the autodiff gradient and fd the central difference. The
// floor keeps FD roundoff noise on truly-zero gradients from registering
// as a relative error.
inline double max_grad_rel_error(std::vector<chronofuse::Tensor>& leaves,
                                 const std::function<chronofuse::Tensor()>& fn, double h = 1e-5,
                                 double floor = 1e-3) {
    using namespace chronofuse;
    for (auto& l : leaves) {
        l.grad_ref();  // ensure allocated so a missing gradient reads as zero
        l.zero_grad();
    }
    Tensor loss = fn();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& l : leaves) analytic.push_back(l.grad());

    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor& l = leaves[li];
        for (std::size_t i = 0; i < l.size(); ++i) {
            const double orig = l.data()[i];
            double fp, fm;
            {
                NoGradGuard ng;
                l.data()[i] = orig + h;
                fp = fn().item();
                l.data()[i] = orig - h;
                fm = fn().item();
            }
            l.data()[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double ad = analytic[li][i];
            const double denom = std::max({std::abs(ad), std::abs(fd), floor});
            worst = std::max(worst, std::abs(ad - fd) / denom);
        }
    }
    return worst;
}
