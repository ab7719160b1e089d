#include "lcmae/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "lcmae/errors.hpp"
#include "lcmae/rng.hpp"

namespace lcmae {

namespace {

double evaluate(const std::function<Tensor()>& f) {
    NoGradGuard guard;
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: function is not finite near the probe point");
    return v;
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0, double h) {
    Tensor x = Tensor::from_data(x0.shape(), std::vector<double>(x0.data().begin(), x0.data().end()), true);
    return grad_check_leaves([&] { return f(x); }, {x}, GradCheckOptions{h, 0, 0});
}

double grad_check_leaves(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                         const GradCheckOptions& options) {
    return grad_check_report(f, leaves, options).max_rel_error;
}

GradCheckReport grad_check_report(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                                  const GradCheckOptions& options) {
    if (!(options.h > 0.0)) throw ContractError("grad_check: h must be positive");
    std::vector<Tensor> params = leaves;
    for (auto& p : params) {
        if (!p.is_leaf()) throw ContractError("grad_check: perturbed tensors must be leaves");
        p.set_requires_grad(true);
        p.zero_grad();
    }
    const Tensor loss = f();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: function is not finite at the probe point");
    loss.backward();

    Rng rng(options.seed);
    GradCheckReport report;
    for (std::size_t li = 0; li < params.size(); ++li) {
        auto& p = params[li];
        const std::vector<double> analytic = p.has_grad() && !p.grad().empty()
                                                 ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                 : std::vector<double>(p.numel(), 0.0);
        std::vector<std::size_t> coords(p.numel());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (options.max_coords != 0 && coords.size() > options.max_coords) {
            const auto perm = rng.permutation(coords.size());
            coords.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(options.max_coords));
        }
        auto data = p.mutable_data();
        for (auto i : coords) {
            const double saved = data[i];
            data[i] = saved + options.h;
            const double up = evaluate(f);
            data[i] = saved - options.h;
            const double down = evaluate(f);
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * options.h);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
            const double err = std::abs(analytic[i] - numeric) / denom;
            if (err > report.max_rel_error) report = {err, li, i, analytic[i], numeric};
        }
    }
    return report;
}

}  // namespace lcmae
