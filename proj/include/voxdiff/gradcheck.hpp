#pragma once

#include "voxdiff/tensor.hpp"

namespace voxdiff {

/// Central-difference gradient verification.
///
/// f must be a deterministic scalar-valued function of x (reseed any
/// randomness per call). Returns the max over coordinates of
///   |analytic - numeric| / (|analytic| + 1e-12).
inline Scalar finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                Scalar h = 1e-5) {
    Tensor probe = Tensor::from_data(x.shape(), x.vec(), true);
    Tensor loss = f(probe);
    if (loss.numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    loss.backward();
    std::vector<Scalar> analytic = probe.grad();

    std::vector<Scalar> base = x.vec();
    Scalar worst = 0.0;
    NoGradGuard ng;
    for (size_t i = 0; i < base.size(); ++i) {
        std::vector<Scalar> bumped = base;
        bumped[i] = base[i] + h;
        Scalar fp = f(Tensor::from_data(x.shape(), bumped)).item();
        bumped[i] = base[i] - h;
        Scalar fm = f(Tensor::from_data(x.shape(), bumped)).item();
        Scalar numeric = (fp - fm) / (2.0 * h);
        Scalar err = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace voxdiff
