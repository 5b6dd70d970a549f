#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "camnet/tape.hpp"
#include "camnet/tensor.hpp"

namespace camnet {

struct GradCheckReport {
    std::string name;
    double max_rel_err = 0.0;   // over elements where the analytic grad is significant
    double max_abs_err = 0.0;   // over elements where it is not
    bool passed = false;
};

// Central finite differences against tape gradients, in double precision.
// `loss_fn` must recompute the scalar loss from the current values of
// `inputs` every time it is called. An element passes when the relative
// error is below rel_tol, or its analytic gradient is tiny and the absolute
// error is below abs_tol.
inline GradCheckReport grad_check(const std::string& name,
                                  std::vector<Tensor<double>> inputs,
                                  const std::function<Tensor<double>()>& loss_fn,
                                  double eps = 1e-4,
                                  double rel_tol = 1e-3,
                                  double abs_tol = 1e-6) {
    GradCheckReport rep;
    rep.name = name;

    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        Tensor<double> loss = loss_fn();
        tape.backward(loss);
        for (auto& t : inputs) analytic.push_back(t.grad());
    }

    auto eval = [&]() -> double {
        Tensor<double> loss = loss_fn();
        return loss.item();
    };

    bool ok = true;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor<double>& t = inputs[ti];
        double* v = t.data();
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const double saved = v[i];
            v[i] = saved + eps;
            const double fp = eval();
            v[i] = saved - eps;
            const double fm = eval();
            v[i] = saved;
            const double fd = (fp - fm) / (2.0 * eps);
            const double an = analytic[ti][static_cast<std::size_t>(i)];
            const double denom = std::max(std::abs(an), std::abs(fd));
            if (std::abs(an) < 1e-6 && std::abs(fd) < 1e-6) {
                rep.max_abs_err = std::max(rep.max_abs_err, std::abs(an - fd));
                if (std::abs(an - fd) > abs_tol * 10) ok = false;
            } else {
                const double rel = std::abs(an - fd) / std::max(denom, 1e-12);
                rep.max_rel_err = std::max(rep.max_rel_err, rel);
                if (rel > rel_tol) ok = false;
            }
        }
    }
    rep.passed = ok;
    return rep;
}

}  // namespace camnet
