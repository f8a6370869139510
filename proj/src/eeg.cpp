#include "neuroscale/eeg.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace neuroscale::eeg {

namespace {
size_t su(int v) { return static_cast<size_t>(v); }
} // namespace

void EpochSet::validate() const {
    if (sample_rate <= 0.0) throw contract_error("EpochSet: sample_rate must be positive");
    if (stimulus_ids.size() != epochs.size()) {
        throw contract_error("EpochSet: " + std::to_string(stimulus_ids.size()) + " stimulus ids for " +
                             std::to_string(epochs.size()) + " trials");
    }
    if (repetition_index.size() != epochs.size()) {
        throw contract_error("EpochSet: repetition_index length mismatch");
    }
    if (!regions.empty() && regions.size() != channels.size()) {
        throw contract_error("EpochSet: region labels must cover all channels");
    }
    const int c = channel_count();
    const int t = samples();
    for (size_t i = 0; i < epochs.size(); ++i) {
        if (epochs[i].ndim() != 2 || epochs[i].extent(0) != c || epochs[i].extent(1) != t) {
            throw contract_error("EpochSet: trial " + std::to_string(i) + " shape " + epochs[i].shape_str() +
                                 " disagrees with [" + std::to_string(c) + "x" + std::to_string(t) + "]");
        }
    }
    if (pre_samples < 0 || pre_samples >= t) {
        if (!(pre_samples == 0 && t == 0)) {
            if (pre_samples < 0 || (t > 0 && pre_samples >= t)) {
                throw contract_error("EpochSet: pre_samples " + std::to_string(pre_samples) +
                                     " outside epoch of length " + std::to_string(t));
            }
        }
    }
}

void EncoderConfig::validate() const {
    const size_t L = conv_in.size();
    if (conv_out.size() != L || conv_kernel.size() != L || conv_stride.size() != L ||
        conv_padding.size() != L || L == 0) {
        throw config_error("EncoderConfig: conv layer lists must be non-empty and equal length");
    }
    for (size_t i = 1; i < L; ++i) {
        if (conv_in[i] != conv_out[i - 1]) {
            throw config_error("EncoderConfig: conv layer " + std::to_string(i) + " expects " +
                               std::to_string(conv_in[i]) + " inputs but layer " + std::to_string(i - 1) +
                               " emits " + std::to_string(conv_out[i - 1]));
        }
    }
    for (size_t i = 0; i < L; ++i) {
        if (gn_groups <= 0 || conv_out[i] % gn_groups != 0) {
            throw config_error("EncoderConfig: conv layer " + std::to_string(i) + " output channels " +
                               std::to_string(conv_out[i]) + " not divisible by gn_groups " +
                               std::to_string(gn_groups));
        }
    }
    if (window_w <= 0 || hidden <= 0 || embed_dim <= 0 || layers < 0 || heads <= 0 || mlp <= 0) {
        throw config_error("EncoderConfig: sizes must be positive (layers may be 0)");
    }
    if (hidden % heads != 0) {
        throw config_error("EncoderConfig: hidden " + std::to_string(hidden) + " not divisible by " +
                           std::to_string(heads) + " heads");
    }
}

EpochSet preprocess(const EpochSet& raw, double target_rate, double baseline_ms, double scale_mV,
                    bool average_repetitions) {
    raw.validate();
    if (target_rate <= 0.0) throw config_error("preprocess: target_rate must be positive");
    if (scale_mV == 0.0) throw config_error("preprocess: scale_mV must be nonzero");
    const double ratio_f = raw.sample_rate / target_rate;
    const int ratio = static_cast<int>(std::lround(ratio_f));
    if (ratio < 1 || std::abs(ratio_f - static_cast<double>(ratio)) > 1e-9) {
        throw config_error("preprocess: sample rate " + std::to_string(raw.sample_rate) +
                           " not an integer multiple of target " + std::to_string(target_rate));
    }
    const int base_n = static_cast<int>(std::lround(baseline_ms * raw.sample_rate / 1000.0));
    if (base_n < 0 || base_n > raw.pre_samples) {
        throw preprocess_error("preprocess: baseline window of " + std::to_string(base_n) +
                               " samples exceeds the " + std::to_string(raw.pre_samples) +
                               " recorded pre-stimulus samples");
    }
    const int c = raw.channel_count();
    const int t_post = raw.samples() - raw.pre_samples;
    const int t_out = t_post / ratio; // trailing partial bin dropped
    if (t_out <= 0) throw preprocess_error("preprocess: no post-onset samples survive decimation");

    EpochSet out;
    out.subject_id = raw.subject_id;
    out.channels = raw.channels;
    out.regions = raw.regions;
    out.sample_rate = target_rate;
    out.pre_samples = 0;
    out.epochs.reserve(raw.epochs.size());
    for (const Tensor& ep : raw.epochs) {
        std::vector<double> v(su(c) * su(t_out));
        for (int j = 0; j < c; ++j) {
            double base = 0.0;
            if (base_n > 0) {
                for (int s = raw.pre_samples - base_n; s < raw.pre_samples; ++s) base += ep.at(j, s);
                base /= static_cast<double>(base_n);
            }
            for (int k = 0; k < t_out; ++k) {
                double acc = 0.0;
                for (int s = 0; s < ratio; ++s) {
                    acc += ep.at(j, raw.pre_samples + k * ratio + s) - base;
                }
                v[su(j) * su(t_out) + su(k)] = acc / static_cast<double>(ratio) / scale_mV;
            }
        }
        out.epochs.push_back(Tensor::from({c, t_out}, std::move(v)));
    }
    out.stimulus_ids = raw.stimulus_ids;
    out.repetition_index = raw.repetition_index;

    if (average_repetitions) {
        std::vector<int> order;           // unique stimulus ids, first-occurrence order
        std::map<int, std::vector<int>> groups;
        for (size_t i = 0; i < out.stimulus_ids.size(); ++i) {
            auto [it, fresh] = groups.try_emplace(out.stimulus_ids[i]);
            if (fresh) order.push_back(out.stimulus_ids[i]);
            it->second.push_back(static_cast<int>(i));
        }
        std::vector<Tensor> avg;
        std::vector<int> ids, reps;
        for (int sid : order) {
            const auto& g = groups[sid];
            std::vector<double> acc(su(c) * su(t_out), 0.0);
            for (int idx : g) {
                const auto& d = out.epochs[su(idx)].data();
                for (size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
            }
            for (double& x : acc) x /= static_cast<double>(g.size());
            avg.push_back(Tensor::from({c, t_out}, std::move(acc)));
            ids.push_back(sid);
            reps.push_back(0);
        }
        out.epochs = std::move(avg);
        out.stimulus_ids = std::move(ids);
        out.repetition_index = std::move(reps);
    }
    out.validate();
    return out;
}

PatchGrid patchify(const Tensor& epoch, int w) {
    if (epoch.ndim() != 2) throw contract_error("patchify: epoch must be [C x T], got " + epoch.shape_str());
    const int c = epoch.extent(0), t = epoch.extent(1);
    if (w <= 0 || w > t) {
        throw config_error("patchify: window " + std::to_string(w) + " outside (0," + std::to_string(t) + "]");
    }
    PatchGrid g;
    g.window_w = w;
    g.channels = c;
    g.per_channel = t / w;
    std::vector<Tensor> rows;
    rows.reserve(su(g.count()));
    for (int j = 0; j < c; ++j) {
        Tensor channel = ops::slice_rows(epoch, j, 1);          // [1 x T]
        for (int k = 0; k < g.per_channel; ++k) {
            rows.push_back(ops::slice_cols(channel, k * w, w)); // [1 x w]
        }
    }
    g.patches = ops::concat_rows(rows);
    return g;
}

namespace {

// Output length of the conv stack for one patch of length w; throws a
// configuration error naming the first layer that collapses to nothing.
int stack_output_len(const EncoderConfig& cfg, int w) {
    int len = w;
    for (size_t i = 0; i < cfg.conv_kernel.size(); ++i) {
        const int k = cfg.conv_kernel[i], s = cfg.conv_stride[i], p = cfg.conv_padding[i];
        if (len + 2 * p < k) {
            throw config_error("temporal conv layer " + std::to_string(i) + ": input length " +
                               std::to_string(len) + " too short for kernel " + std::to_string(k));
        }
        len = (len + 2 * p - k) / s + 1;
        if (len <= 0) {
            throw config_error("temporal conv layer " + std::to_string(i) + ": output length " +
                               std::to_string(len));
        }
    }
    return len;
}

} // namespace

void init_encoder(ParamStore& ps, const EncoderConfig& cfg, int channels, int samples, uint64_t seed,
                  const std::string& prefix) {
    cfg.validate();
    if (cfg.window_w > samples) {
        throw config_error("init_encoder: window " + std::to_string(cfg.window_w) + " exceeds epoch length " +
                           std::to_string(samples));
    }
    const int flat = cfg.conv_out.back() * stack_output_len(cfg, cfg.window_w);
    for (size_t i = 0; i < cfg.conv_kernel.size(); ++i) {
        const std::string cp = prefix + "conv" + std::to_string(i) + ".";
        ps.create_normal(cp + "w", {cfg.conv_out[i], cfg.conv_in[i], cfg.conv_kernel[i]}, seed);
        ps.create(cp + "b", {cfg.conv_out[i]}, 0.0);
        ps.create(cp + "gamma", {cfg.conv_out[i]}, 1.0);
        ps.create(cp + "beta", {cfg.conv_out[i]}, 0.0);
    }
    nn::init_linear(ps, prefix + "patch.", flat, cfg.hidden, seed);
    ps.create_normal(prefix + "te", {samples / cfg.window_w, cfg.hidden}, seed);
    ps.create_normal(prefix + "se", {channels, cfg.hidden}, seed);
    for (int l = 0; l < cfg.layers; ++l) {
        nn::init_block(ps, prefix + "block" + std::to_string(l) + ".", cfg.hidden, cfg.mlp, seed);
    }
    nn::init_linear(ps, prefix + "head.", cfg.hidden, cfg.embed_dim, seed);
}

Tensor temporal_encode(const PatchGrid& grid, const EncoderConfig& cfg, const ParamStore& ps,
                       const std::string& prefix) {
    cfg.validate();
    stack_output_len(cfg, grid.window_w); // layer-naming length check up front
    const int n = grid.count();
    std::vector<Tensor> rows;
    rows.reserve(su(n));
    for (int p = 0; p < n; ++p) {
        Tensor x = ops::reshape(ops::slice_rows(grid.patches, p, 1), {cfg.conv_in[0], grid.window_w});
        for (size_t i = 0; i < cfg.conv_kernel.size(); ++i) {
            const std::string cp = prefix + "conv" + std::to_string(i) + ".";
            x = ops::conv1d(x, ps.get(cp + "w"), ps.get(cp + "b"), cfg.conv_stride[i], cfg.conv_padding[i]);
            x = ops::group_norm(x, cfg.gn_groups, ps.get(cp + "gamma"), ps.get(cp + "beta"), cfg.gn_eps);
            x = ops::gelu(x);
        }
        rows.push_back(nn::apply_linear(ps, prefix + "patch.", ops::reshape(x, {1, static_cast<int>(x.numel())})));
    }
    return ops::concat_rows(rows);
}

Tensor add_positional(const Tensor& embeds, const PatchGrid& grid, const Tensor& te, const Tensor& se) {
    if (embeds.extent(0) != grid.count()) {
        throw contract_error("add_positional: " + std::to_string(embeds.extent(0)) + " embeddings for " +
                             std::to_string(grid.count()) + " patches");
    }
    if (grid.per_channel > te.extent(0) || grid.channels > se.extent(0)) {
        throw contract_error("add_positional: positional tables (" + te.shape_str() + ", " + se.shape_str() +
                             ") do not cover a " + std::to_string(grid.channels) + "x" +
                             std::to_string(grid.per_channel) + " patch grid");
    }
    std::vector<int> time_idx(su(grid.count())), chan_idx(su(grid.count()));
    for (int p = 0; p < grid.count(); ++p) {
        time_idx[su(p)] = grid.time_of(p);
        chan_idx[su(p)] = grid.channel_of(p);
    }
    Tensor te_rows = ops::gather_rows(te, time_idx);
    Tensor se_rows = ops::gather_rows(se, chan_idx);
    return ops::add(embeds, ops::add(te_rows, se_rows));
}

namespace {

// Shared trunk: contextualized patch embeddings [count x hidden].
Tensor trunk(const Tensor& epoch, const EncoderConfig& cfg, const ParamStore& ps,
             const std::string& prefix, PatchGrid& grid_out) {
    grid_out = patchify(epoch, cfg.window_w);
    Tensor h = temporal_encode(grid_out, cfg, ps, prefix);
    h = add_positional(h, grid_out, ps.get(prefix + "te"), ps.get(prefix + "se"));
    for (int l = 0; l < cfg.layers; ++l) {
        h = nn::block_forward(ps, prefix + "block" + std::to_string(l) + ".", h, cfg.heads, cfg.ln_eps);
        if (!h.all_finite()) {
            throw numeric_error("encoder transformer layer " + std::to_string(l) +
                                " produced a non-finite activation");
        }
    }
    return h;
}

} // namespace

Tensor encode(const Tensor& epoch, const EncoderConfig& cfg, const ParamStore& ps,
              const std::string& prefix) {
    PatchGrid grid;
    Tensor h = trunk(epoch, cfg, ps, prefix, grid);
    Tensor pooled = ops::reshape(ops::mean_rows(h), {1, cfg.hidden});
    return ops::reshape(nn::apply_linear(ps, prefix + "head.", pooled), {cfg.embed_dim});
}

Tensor encode_channels(const Tensor& epoch, const EncoderConfig& cfg, const ParamStore& ps,
                       const std::string& prefix) {
    PatchGrid grid;
    Tensor h = trunk(epoch, cfg, ps, prefix, grid);
    std::vector<Tensor> rows;
    rows.reserve(su(grid.channels));
    for (int j = 0; j < grid.channels; ++j) {
        Tensor mine = ops::slice_rows(h, j * grid.per_channel, grid.per_channel);
        rows.push_back(ops::reshape(ops::mean_rows(mine), {1, cfg.hidden}));
    }
    return nn::apply_linear(ps, prefix + "head.", ops::concat_rows(rows));
}

Tensor encode_batch(const std::vector<Tensor>& epochs, const EncoderConfig& cfg, const ParamStore& ps,
                    const std::string& prefix) {
    if (epochs.empty()) throw contract_error("encode_batch: empty epoch list");
    std::vector<Tensor> rows;
    rows.reserve(epochs.size());
    for (const Tensor& ep : epochs) {
        rows.push_back(ops::reshape(encode(ep, cfg, ps, prefix), {1, cfg.embed_dim}));
    }
    return ops::concat_rows(rows);
}

} // namespace neuroscale::eeg
