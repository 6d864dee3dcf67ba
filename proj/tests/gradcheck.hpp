#pragma once

// Central finite-difference gradient oracle. Runs at 64-bit: perturbs each
// leaf element by +/-h, rebuilds the graph through `build_loss`, and compares
// the quotient against the analytic gradient from backward(). Independent of
// the engine's backward path by construction (forward evaluations only).

#include <cmath>
#include <functional>
#include <vector>

#include "vstain/tensor.hpp"

namespace gradcheck {

using vstain::Tensor64;

struct Report {
    double max_rel_error = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// build_loss: () -> Tensor64 scalar, reading the current leaf values.
inline Report run(std::vector<Tensor64>& leaves,
                  const std::function<Tensor64()>& build_loss, double h = 1e-4) {
    Tensor64 loss = build_loss();
    vstain::backward(loss, leaves);

    Report rep;
    for (auto& leaf : leaves) {
        const std::vector<double> analytic = leaf.grad();
        auto& vals = leaf.mutable_values();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double keep = vals[i];
            vals[i] = keep + h;
            const double fp = build_loss().item();
            vals[i] = keep - h;
            const double fm = build_loss().item();
            vals[i] = keep;
            const double numeric = (fp - fm) / (2.0 * h);
            const double denom = std::max(std::abs(analytic[i]) + std::abs(numeric), 1e-6);
            const double rel = std::abs(analytic[i] - numeric) / denom;
            if (rel > rep.max_rel_error) {
                rep.max_rel_error = rel;
                rep.worst_analytic = analytic[i];
                rep.worst_numeric = numeric;
            }
        }
    }
    return rep;
}

}  // namespace gradcheck
