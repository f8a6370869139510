#include "neuroscale/optim.hpp"

#include <cmath>

#include "neuroscale/errors.hpp"

namespace neuroscale {

Tensor& ParamStore::create(const std::string& name, std::vector<int> shape, double fill) {
    if (params_.count(name)) throw contract_error("parameter '" + name + "' already exists");
    Tensor t(std::move(shape), fill, /*requires_grad=*/true);
    return params_.emplace(name, std::move(t)).first->second;
}

Tensor& ParamStore::create_normal(const std::string& name, std::vector<int> shape, uint64_t seed,
                                  double stddev) {
    if (params_.count(name)) throw contract_error("parameter '" + name + "' already exists");
    int64_t n = 1;
    for (int e : shape) n *= e;
    Rng rng(hash_mix(seed, fnv1a64(name)));
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.normal() * stddev;
    Tensor t = Tensor::from(std::move(shape), std::move(v), /*requires_grad=*/true);
    return params_.emplace(name, std::move(t)).first->second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw contract_error("unknown parameter '" + name + "'");
    return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw contract_error("unknown parameter '" + name + "'");
    return it->second;
}

int64_t ParamStore::scalar_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
}

double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak, double min_lr) {
    if (total_steps <= 0) throw config_error("cosine_lr: total_steps must be positive");
    if (warmup_steps < 0 || warmup_steps > total_steps) {
        throw config_error("cosine_lr: warmup_steps outside [0,total_steps]");
    }
    if (step < warmup_steps) {
        return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    const int64_t span = total_steps - warmup_steps;
    if (span <= 0) return peak;
    const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
    const double clamped = progress > 1.0 ? 1.0 : progress;
    return min_lr + 0.5 * (peak - min_lr) * (1.0 + std::cos(M_PI * clamped));
}

AdamW::AdamW(ParamStore& params, AdamWConfig cfg) : params_(params), cfg_(cfg) {
    if (!(cfg.lr > 0.0) && cfg.lr != 0.0) throw config_error("AdamW: lr must be >= 0");
    if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0) {
        throw config_error("AdamW: betas must lie in [0,1)");
    }
}

void AdamW::set_scale_prefix(const std::string& prefix, double scale) {
    for (auto& [name, t] : params_.all()) {
        if (name.rfind(prefix, 0) == 0) scales_[name] = scale;
    }
}

void AdamW::step(GradTape& tape, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params_.all()) {
        std::vector<double> g = tape.grad(p);
        Slot& s = state_[name];
        if (s.m.empty()) {
            s.m.assign(g.size(), 0.0);
            s.v.assign(g.size(), 0.0);
        }
        double eff = lr;
        auto it = scales_.find(name);
        if (it != scales_.end()) eff *= it->second;
        auto& w = p.data_mut();
        for (size_t i = 0; i < g.size(); ++i) {
            s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
            s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mh = s.m[i] / bc1;
            const double vh = s.v[i] / bc2;
            w[i] -= eff * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * w[i]);
        }
        if (!p.all_finite()) {
            throw numeric_error("AdamW: parameter '" + name + "' became non-finite after update " +
                                std::to_string(t_));
        }
    }
}

} // namespace neuroscale
