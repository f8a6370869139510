#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "neuroscale/rng.hpp"
#include "neuroscale/tensor.hpp"

namespace neuroscale {

// Named trainable parameters. std::map gives a stable (lexicographic)
// iteration order, which checkpoint serialization and deterministic optimizer
// sweeps depend on. Initialization is keyed by (seed, name) so adding or
// removing one parameter never shifts another one's init.
class ParamStore {
public:
    Tensor& create(const std::string& name, std::vector<int> shape, double fill = 0.0);
    Tensor& create_normal(const std::string& name, std::vector<int> shape, uint64_t seed,
                          double stddev = 0.02);

    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return params_.count(name) != 0; }

    std::map<std::string, Tensor>& all() { return params_; }
    const std::map<std::string, Tensor>& all() const { return params_; }

    int64_t scalar_count() const;

private:
    std::map<std::string, Tensor> params_;
};

struct AdamWConfig {
    double lr = 1e-3;       // peak learning rate
    double min_lr = 0.0;    // cosine floor
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0; // decoupled
};

// Piecewise schedule: linear warmup to peak, then cosine decay to min_lr.
double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak, double min_lr);

// Decoupled-weight-decay Adam over a ParamStore. Updates walk the store in
// name order, so results are bit-reproducible in sequential mode.
class AdamW {
public:
    struct Slot {
        std::vector<double> m, v;
    };

    AdamW(ParamStore& params, AdamWConfig cfg);

    // One update using gradients recorded on `tape`, at learning rate `lr`.
    void step(GradTape& tape, double lr);

    // Per-parameter learning-rate multiplier for every name starting with
    // `prefix` (layer-wise decay hook; defaults to 1 everywhere).
    void set_scale_prefix(const std::string& prefix, double scale);

    int64_t steps_taken() const { return t_; }
    const std::map<std::string, Slot>& state() const { return state_; }
    std::map<std::string, Slot>& mutable_state() { return state_; }
    void set_steps_taken(int64_t t) { t_ = t; }
    const AdamWConfig& config() const { return cfg_; }

private:
    ParamStore& params_;
    AdamWConfig cfg_;
    std::map<std::string, Slot> state_;
    std::map<std::string, double> scales_;
    int64_t t_ = 0;
};

} // namespace neuroscale
