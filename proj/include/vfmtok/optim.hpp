#pragma once

// AdamW with decoupled weight decay, bias-corrected moments, and global
// gradient-norm clipping applied before the moment update.

#include "vfmtok/tensor.hpp"

namespace vfmtok {

template <typename S>
struct AdamWState {
    S lr = S(3e-4);
    S beta1 = S(0.9);
    S beta2 = S(0.95);
    S eps = S(1e-8);
    S weight_decay = S(0.05);
    S clip_norm = S(1.0);
    int64_t step_count = 0;
    std::vector<std::vector<S>> m;  // first moments, one buffer per parameter
    std::vector<std::vector<S>> v;  // second moments

    void init(const std::vector<Tensor<S>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p.data().size(), S(0));
            v.emplace_back(p.data().size(), S(0));
        }
        step_count = 0;
    }

    // Returns the pre-clip global gradient norm.
    S step(std::vector<Tensor<S>>& params) {
        require(m.size() == params.size(), "adamw: state holds " + std::to_string(m.size()) +
                                               " buffers for " + std::to_string(params.size()) +
                                               " parameters");
        double sq = 0;
        for (auto& p : params)
            if (p.has_grad())
                for (S g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
        const S norm = static_cast<S>(std::sqrt(sq));
        const S scale_g = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : S(1);

        ++step_count;
        const S bc1 = S(1) - std::pow(beta1, static_cast<S>(step_count));
        const S bc2 = S(1) - std::pow(beta2, static_cast<S>(step_count));
        for (size_t pi = 0; pi < params.size(); ++pi) {
            auto& p = params[pi];
            require(m[pi].size() == p.data().size(),
                    "adamw: moment buffer extent mismatch for parameter " + std::to_string(pi));
            auto& pd = p.data();
            const auto& gd = p.grad();
            auto& mi = m[pi];
            auto& vi = v[pi];
            for (size_t i = 0; i < pd.size(); ++i) {
                const S g = gd[i] * scale_g;
                mi[i] = beta1 * mi[i] + (S(1) - beta1) * g;
                vi[i] = beta2 * vi[i] + (S(1) - beta2) * g * g;
                const S mhat = mi[i] / bc1;
                const S vhat = vi[i] / bc2;
                pd[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * pd[i]);
            }
        }
        return norm;
    }
};

}  // namespace vfmtok
