#include "neuroscale/pipeline.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "neuroscale/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "container formats assume a little-endian host");

// JSON bindings live next to the config structs they serialize. Per-stage
// seed fields are deliberately excluded: the pipeline derives every stage
// seed from RunConfig::seed.
namespace neuroscale::eeg {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EncoderConfig, window_w, conv_in, conv_out,
                                                conv_kernel, conv_stride, conv_padding, gn_groups,
                                                hidden, mlp, layers, heads, embed_dim, drop_path,
                                                layer_lr_decay, ln_eps, gn_eps)
}
namespace neuroscale::align {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AlignTrainConfig, lambda, tau_init, epochs,
                                                batch_size, warmup_epochs, lr, min_lr, beta1, beta2,
                                                weight_decay, normalize_for_mse)
}
namespace neuroscale::tok {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TokenizerConfig, image_size, image_channels,
                                                hidden_channels, feature_dim, vocab, gn_groups,
                                                downsamples, gn_eps, schedule_sizes)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TokTrainConfig, epochs, batch_size, warmup_epochs,
                                                lr, min_lr, beta1, beta2, weight_decay, beta_commit)
}
namespace neuroscale::nsp {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NspConfig, depth, hidden, mlp, heads, vocab,
                                                cond_dim, feature_dim, schedule_sizes,
                                                cond_drop_rate, cfg_ratio, top_k, ln_eps)
}

namespace neuroscale::pipeline {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetConfig, classes, pairs_per_class, channels,
                                                samples, image_size, embed_dim, val_per_class,
                                                noise_level, image_jitter)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NspTrainConfig, epochs, batch_size, warmup_epochs,
                                                lr, min_lr, beta1, beta2, weight_decay,
                                                overfit_pairs)

// ---------------------------------------------------------------------------
// Configuration

void DatasetConfig::validate() const {
    if (classes < 1 || pairs_per_class < 1 || channels < 1 || samples < 1 || image_size < 1 ||
        embed_dim < 1) {
        throw config_error("DatasetConfig: all counts must be >= 1");
    }
    if (val_per_class < 0 || val_per_class >= pairs_per_class) {
        throw config_error("DatasetConfig: val_per_class must leave at least one training pair");
    }
    if (noise_level < 0.0 || image_jitter < 0.0) {
        throw config_error("DatasetConfig: noise levels must be >= 0");
    }
}

void NspTrainConfig::validate() const {
    if (epochs < 0 || warmup_epochs < 0 || overfit_pairs < 0) {
        throw config_error("NspTrainConfig: counts must be >= 0");
    }
    if (batch_size < 1) throw config_error("NspTrainConfig: batch_size must be >= 1");
    if (lr < 0.0 || min_lr < 0.0) throw config_error("NspTrainConfig: learning rates must be >= 0");
}

void RunConfig::validate() const {
    data.validate();
    encoder.validate();
    align_train.validate();
    tokenizer.validate();
    tok_train.validate();
    nsp.validate();
    nsp_train.validate();
    if (out_dir.empty()) throw config_error("RunConfig: out_dir must not be empty");
    if (encoder.embed_dim != data.embed_dim) {
        throw config_error("RunConfig: encoder embed_dim " + std::to_string(encoder.embed_dim) +
                           " does not match image embedding dim " + std::to_string(data.embed_dim));
    }
    if (nsp.cond_dim != encoder.embed_dim) {
        throw config_error("RunConfig: nsp cond_dim " + std::to_string(nsp.cond_dim) +
                           " does not match encoder embed_dim " + std::to_string(encoder.embed_dim));
    }
    if (nsp.vocab != tokenizer.vocab) {
        throw config_error("RunConfig: nsp vocab " + std::to_string(nsp.vocab) +
                           " does not match tokenizer vocab " + std::to_string(tokenizer.vocab));
    }
    if (nsp.feature_dim != tokenizer.feature_dim) {
        throw config_error("RunConfig: nsp feature_dim does not match the tokenizer's");
    }
    if (nsp.schedule_sizes != tokenizer.schedule_sizes) {
        throw config_error("RunConfig: nsp and tokenizer scale schedules differ");
    }
    if (tokenizer.image_size != data.image_size) {
        throw config_error("RunConfig: tokenizer image_size " + std::to_string(tokenizer.image_size) +
                           " does not match dataset image_size " + std::to_string(data.image_size));
    }
    if (tokenizer.image_channels != 3) {
        throw config_error("RunConfig: the synthetic dataset produces 3-channel images");
    }
    if (data.samples < encoder.window_w) {
        throw config_error("RunConfig: trials of " + std::to_string(data.samples) +
                           " samples are shorter than one window of " +
                           std::to_string(encoder.window_w));
    }
}

RunConfig desk_config() {
    RunConfig c;
    c.data = DatasetConfig{}; // 16 classes x 8 pairs, 8 channels, T=64, 16x16 images

    c.encoder.window_w = 8;
    c.encoder.conv_in = {1, 4};
    c.encoder.conv_out = {4, 4};
    c.encoder.conv_kernel = {5, 3};
    c.encoder.conv_stride = {2, 1};
    c.encoder.conv_padding = {2, 1};
    c.encoder.gn_groups = 2;
    c.encoder.hidden = 32;
    c.encoder.mlp = 64;
    c.encoder.layers = 2;
    c.encoder.heads = 4;
    c.encoder.embed_dim = 16;

    c.align_train.epochs = 30;
    c.align_train.batch_size = 16;
    c.align_train.warmup_epochs = 2;
    c.align_train.lr = 2e-3;
    c.align_train.min_lr = 1e-4;

    c.tokenizer.image_size = 16;
    c.tokenizer.hidden_channels = 16;
    c.tokenizer.feature_dim = 8;
    c.tokenizer.vocab = 32;
    c.tokenizer.gn_groups = 4;
    c.tokenizer.downsamples = 2;
    c.tokenizer.schedule_sizes = {1, 2, 4};
    c.tok_train.epochs = 150;

    c.nsp.depth = 2;
    c.nsp.hidden = 64;
    c.nsp.mlp = 128;
    c.nsp.heads = 4;
    c.nsp.vocab = 32;
    c.nsp.cond_dim = 16;
    c.nsp.feature_dim = 8;
    c.nsp.schedule_sizes = {1, 2, 4};
    c.nsp.cond_drop_rate = 0.1;
    c.nsp.cfg_ratio = 2.0;
    c.nsp.top_k = 1;

    c.nsp_train = NspTrainConfig{};
    return c;
}

namespace {

json run_config_json(const RunConfig& c) {
    json j;
    j["data"] = c.data;
    j["encoder"] = c.encoder;
    j["align_train"] = c.align_train;
    j["tokenizer"] = c.tokenizer;
    j["tok_train"] = c.tok_train;
    j["nsp"] = c.nsp;
    j["nsp_train"] = c.nsp_train;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["sequential"] = c.sequential;
    j["eval_self_test"] = c.eval_self_test;
    return j;
}

} // namespace

std::string to_canonical_json(const RunConfig& cfg) {
    return run_config_json(cfg).dump(); // object keys are lexicographically sorted
}

RunConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw config_error(std::string("config: ") + e.what());
    }
    if (!j.is_object()) throw config_error("config: top level must be a JSON object");
    static const std::set<std::string> known = {"data",      "encoder", "align_train",    "tokenizer",
                                               "tok_train", "nsp",     "nsp_train",      "seed",
                                               "out_dir",   "sequential", "eval_self_test"};
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!known.count(key)) throw config_error("config: unknown key '" + key + "'");
    }
    RunConfig c;
    try {
        if (j.contains("data")) j.at("data").get_to(c.data);
        if (j.contains("encoder")) j.at("encoder").get_to(c.encoder);
        if (j.contains("align_train")) j.at("align_train").get_to(c.align_train);
        if (j.contains("tokenizer")) j.at("tokenizer").get_to(c.tokenizer);
        if (j.contains("tok_train")) j.at("tok_train").get_to(c.tok_train);
        if (j.contains("nsp")) j.at("nsp").get_to(c.nsp);
        if (j.contains("nsp_train")) j.at("nsp_train").get_to(c.nsp_train);
        c.seed = j.value("seed", c.seed);
        c.out_dir = j.value("out_dir", c.out_dir);
        c.sequential = j.value("sequential", c.sequential);
        c.eval_self_test = j.value("eval_self_test", c.eval_self_test);
    } catch (const json::exception& e) {
        throw config_error(std::string("config: ") + e.what());
    }
    return c;
}

uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(to_canonical_json(cfg)); }

// ---------------------------------------------------------------------------
// Synthetic dataset

namespace {

// 10-20 names cycled over the channel count; suffixed when a name repeats so
// channel identities stay distinct.
const std::vector<std::string>& electrode_names() {
    static const std::vector<std::string> names = {"Fp1", "F3", "T7", "C3", "P3", "O1", "Fz", "Cz",
                                                   "Pz", "O2", "T8", "F4", "AF3", "FC1", "CP2",
                                                   "PO3"};
    return names;
}

std::vector<double> clamp01(std::vector<double> v) {
    for (double& x : v) x = std::min(1.0, std::max(0.0, x));
    return v;
}

} // namespace

void Dataset::validate() const {
    cfg.validate();
    const int n = cfg.classes * cfg.pairs_per_class;
    if (pair_count() != n || trials.trial_count() != n) {
        throw contract_error("Dataset: expected " + std::to_string(n) + " pairs, have " +
                             std::to_string(pair_count()) + " images and " +
                             std::to_string(trials.trial_count()) + " trials");
    }
    trials.validate();
    if (image_embeds.ndim() != 2 || image_embeds.extent(0) != n ||
        image_embeds.extent(1) != cfg.embed_dim) {
        throw contract_error("Dataset: image embeddings " + image_embeds.shape_str() +
                             " do not match " + std::to_string(n) + " pairs of dim " +
                             std::to_string(cfg.embed_dim));
    }
    const int pix = 3 * cfg.image_size * cfg.image_size;
    if (projection.ndim() != 2 || projection.extent(0) != cfg.embed_dim ||
        projection.extent(1) != pix) {
        throw contract_error("Dataset: projection " + projection.shape_str() + " must be [" +
                             std::to_string(cfg.embed_dim) + "x" + std::to_string(pix) + "]");
    }
    if (static_cast<int>(pair_image.size()) != n) {
        throw contract_error("Dataset: pair_image must cover every trial");
    }
    for (int m : pair_image) {
        if (m < 0 || m >= n) throw index_error("Dataset: pair image row " + std::to_string(m));
    }
    for (int v : val_indices) {
        if (v < 0 || v >= n) throw index_error("Dataset: validation row " + std::to_string(v));
    }
    for (const Tensor& img : images) {
        if (img.ndim() != 3 || img.extent(0) != 3 || img.extent(1) != cfg.image_size ||
            img.extent(2) != cfg.image_size) {
            throw contract_error("Dataset: image shape " + img.shape_str());
        }
    }
}

Dataset synth_dataset(const DatasetConfig& cfg, uint64_t seed) {
    cfg.validate();
    Dataset ds;
    ds.cfg = cfg;
    ds.seed = seed;
    const int n = cfg.classes * cfg.pairs_per_class;
    const int c_ch = cfg.channels, t = cfg.samples, s = cfg.image_size, d = cfg.embed_dim;
    const int pix = 3 * s * s;
    const int sources = 4;

    ds.trials.subject_id = "synthetic-01";
    ds.trials.sample_rate = 250.0;
    ds.trials.pre_samples = 0;
    for (int i = 0; i < c_ch; ++i) {
        std::string name = electrode_names()[static_cast<size_t>(i) % electrode_names().size()];
        if (i >= static_cast<int>(electrode_names().size())) {
            name += "_" + std::to_string(i / static_cast<int>(electrode_names().size()));
        }
        ds.trials.channels.push_back(name);
        ds.trials.regions.push_back(metrics::region_from_electrode(name));
    }

    // Fixed mixing matrix from sources to channels.
    Rng mix_rng(hash_mix(seed, 101));
    std::vector<double> mixing(static_cast<size_t>(c_ch * sources));
    for (double& v : mixing) v = mix_rng.normal() / std::sqrt(static_cast<double>(sources));

    // Per-class prototype signals and prototype images.
    std::vector<std::vector<double>> proto_signal(static_cast<size_t>(cfg.classes));
    std::vector<std::vector<double>> proto_image(static_cast<size_t>(cfg.classes));
    for (int c = 0; c < cfg.classes; ++c) {
        Rng crng(hash_mix(seed, 200 + static_cast<uint64_t>(c)));
        std::vector<double> pattern(static_cast<size_t>(sources * t));
        for (int sct = 0; sct < sources; ++sct) {
            const double freq = 1.0 + 7.0 * crng.uniform();
            const double phase = 6.283185307179586477 * crng.uniform();
            const double amp = 0.5 + crng.uniform();
            for (int k = 0; k < t; ++k) {
                pattern[static_cast<size_t>(sct * t + k)] =
                    amp * std::sin(6.283185307179586477 * freq * k / t + phase);
            }
        }
        std::vector<double> clean(static_cast<size_t>(c_ch * t), 0.0);
        for (int ch = 0; ch < c_ch; ++ch) {
            for (int sct = 0; sct < sources; ++sct) {
                const double w = mixing[static_cast<size_t>(ch * sources + sct)];
                for (int k = 0; k < t; ++k) {
                    clean[static_cast<size_t>(ch * t + k)] += w * pattern[static_cast<size_t>(sct * t + k)];
                }
            }
        }
        proto_signal[static_cast<size_t>(c)] = std::move(clean);

        // Smooth random blobs per color channel, normalized into [0,1].
        Rng irng(hash_mix(seed, 400 + static_cast<uint64_t>(c)));
        std::vector<double> img(static_cast<size_t>(pix), 0.0);
        for (int ch = 0; ch < 3; ++ch) {
            double peak = 0.0;
            for (int blob = 0; blob < 3; ++blob) {
                const double cx = s * irng.uniform();
                const double cy = s * irng.uniform();
                const double sigma = s / 8.0 + (s / 3.0 - s / 8.0) * irng.uniform();
                const double amp = 0.3 + 0.7 * irng.uniform();
                for (int y = 0; y < s; ++y) {
                    for (int x = 0; x < s; ++x) {
                        const double dist2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                        img[static_cast<size_t>(ch * s * s + y * s + x)] +=
                            amp * std::exp(-dist2 / (2.0 * sigma * sigma));
                    }
                }
            }
            for (int p = 0; p < s * s; ++p) {
                peak = std::max(peak, img[static_cast<size_t>(ch * s * s + p)]);
            }
            for (int p = 0; p < s * s; ++p) img[static_cast<size_t>(ch * s * s + p)] /= peak;
        }
        proto_image[static_cast<size_t>(c)] = std::move(img);
    }

    for (int c = 0; c < cfg.classes; ++c) {
        for (int r = 0; r < cfg.pairs_per_class; ++r) {
            const int row = c * cfg.pairs_per_class + r;
            Rng trng(hash_mix(seed, 1000 + static_cast<uint64_t>(row)));
            std::vector<double> sig = proto_signal[static_cast<size_t>(c)];
            for (double& v : sig) v += cfg.noise_level * trng.normal();
            ds.trials.epochs.push_back(Tensor::from({c_ch, t}, std::move(sig)));
            ds.trials.stimulus_ids.push_back(c);
            ds.trials.repetition_index.push_back(r);

            Rng jrng(hash_mix(seed, 5000 + static_cast<uint64_t>(row)));
            std::vector<double> img = proto_image[static_cast<size_t>(c)];
            for (double& v : img) v += cfg.image_jitter * jrng.normal();
            ds.images.push_back(Tensor::from({3, s, s}, clamp01(std::move(img))));
            ds.pair_image.push_back(row);
            if (r >= cfg.pairs_per_class - cfg.val_per_class) ds.val_indices.push_back(row);
        }
    }

    Rng prng(hash_mix(seed, 77));
    std::vector<double> proj(static_cast<size_t>(d * pix));
    for (double& v : proj) v = prng.normal() / std::sqrt(static_cast<double>(pix));
    ds.projection = Tensor::from({d, pix}, std::move(proj));

    std::vector<double> emb(static_cast<size_t>(n * d), 0.0);
    for (int i = 0; i < n; ++i) {
        const auto& img = ds.images[static_cast<size_t>(i)].data();
        double norm = 0.0;
        for (int k = 0; k < d; ++k) {
            double dot = 0.0;
            for (int p = 0; p < pix; ++p) {
                dot += ds.projection.data()[static_cast<size_t>(k * pix + p)] * img[static_cast<size_t>(p)];
            }
            emb[static_cast<size_t>(i * d + k)] = dot;
            norm += dot * dot;
        }
        norm = std::sqrt(norm);
        if (norm < 1e-12) throw numeric_error("synth_dataset: degenerate image embedding");
        for (int k = 0; k < d; ++k) emb[static_cast<size_t>(i * d + k)] /= norm;
    }
    ds.image_embeds = Tensor::from({n, d}, std::move(emb));

    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Byte plumbing

namespace {

constexpr uint32_t kTagMeta = 1;
constexpr uint32_t kTagSignals = 2;
constexpr uint32_t kTagImages = 3;
constexpr uint32_t kTagEmbeds = 4;
constexpr uint32_t kTagProjection = 5;
constexpr uint32_t kTagRecons = 6;

template <class T>
void put_scalar(std::vector<uint8_t>& out, T v) {
    const size_t off = out.size();
    out.resize(off + sizeof(T));
    std::memcpy(out.data() + off, &v, sizeof(T));
}

void put_f64s(std::vector<uint8_t>& out, const std::vector<double>& v) {
    const size_t off = out.size();
    out.resize(off + v.size() * sizeof(double));
    std::memcpy(out.data() + off, v.data(), v.size() * sizeof(double));
}

void put_string(std::vector<uint8_t>& out, const std::string& s) {
    put_scalar<uint32_t>(out, static_cast<uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

class ByteReader {
public:
    ByteReader(const uint8_t* p, size_t n, std::string what) : p_(p), n_(n), what_(std::move(what)) {}

    template <class T>
    T scalar() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, p_ + off_, sizeof(T));
        off_ += sizeof(T);
        return v;
    }

    std::vector<double> f64s(size_t count) {
        need(count * sizeof(double));
        std::vector<double> v(count);
        std::memcpy(v.data(), p_ + off_, count * sizeof(double));
        off_ += count * sizeof(double);
        return v;
    }

    std::string str() {
        const uint32_t len = scalar<uint32_t>();
        need(len);
        std::string s(reinterpret_cast<const char*>(p_ + off_), len);
        off_ += len;
        return s;
    }

    std::vector<uint8_t> bytes(size_t count) {
        need(count);
        std::vector<uint8_t> v(p_ + off_, p_ + off_ + count);
        off_ += count;
        return v;
    }

    size_t remaining() const { return n_ - off_; }
    size_t offset() const { return off_; }

private:
    void need(size_t k) const {
        if (off_ + k > n_) throw config_error(what_ + ": truncated file");
    }

    const uint8_t* p_;
    size_t n_;
    size_t off_ = 0;
    std::string what_;
};

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw config_error("cannot open '" + path + "'");
    in.seekg(0, std::ios::end);
    const std::streamoff len = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<uint8_t> bytes(static_cast<size_t>(len));
    if (len > 0) in.read(reinterpret_cast<char*>(bytes.data()), len);
    if (!in) throw config_error("failed reading '" + path + "'");
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw config_error("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw config_error("failed writing '" + path + "'");
}

uint32_t payload_crc(const std::vector<uint8_t>& payload) {
    return static_cast<uint32_t>(
        ::crc32(0L, payload.data(), static_cast<uInt>(payload.size())));
}

} // namespace

void write_container(const std::string& path, const std::vector<Section>& sections) {
    std::vector<uint8_t> out;
    out.insert(out.end(), {'A', 'V', 'D', 'S'});
    put_scalar<uint32_t>(out, 1u);
    put_scalar<uint32_t>(out, static_cast<uint32_t>(sections.size()));
    for (const Section& s : sections) {
        put_scalar<uint32_t>(out, s.tag);
        put_scalar<uint64_t>(out, static_cast<uint64_t>(s.payload.size()));
        out.insert(out.end(), s.payload.begin(), s.payload.end());
        put_scalar<uint32_t>(out, payload_crc(s.payload));
    }
    write_file_bytes(path, out);
}

std::vector<Section> read_container(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    ByteReader r(bytes.data(), bytes.size(), "container '" + path + "'");
    const auto magic = r.bytes(4);
    if (std::string(magic.begin(), magic.end()) != "AVDS") {
        throw config_error("container '" + path + "': bad magic");
    }
    const uint32_t version = r.scalar<uint32_t>();
    if (version != 1) {
        throw config_error("container '" + path + "': unsupported version " + std::to_string(version));
    }
    const uint32_t count = r.scalar<uint32_t>();
    std::vector<Section> sections;
    for (uint32_t i = 0; i < count; ++i) {
        Section s;
        s.tag = r.scalar<uint32_t>();
        const uint64_t len = r.scalar<uint64_t>();
        s.payload = r.bytes(static_cast<size_t>(len));
        const uint32_t crc = r.scalar<uint32_t>();
        if (crc != payload_crc(s.payload)) {
            throw config_error("container '" + path + "': section " + std::to_string(i) +
                               " checksum mismatch");
        }
        sections.push_back(std::move(s));
    }
    if (r.remaining() != 0) throw config_error("container '" + path + "': trailing bytes");
    return sections;
}

void save_dataset(const Dataset& ds, const std::string& path) {
    ds.validate();
    json meta;
    meta["kind"] = "dataset";
    meta["cfg"] = ds.cfg;
    meta["seed"] = ds.seed;
    meta["subject_id"] = ds.trials.subject_id;
    meta["sample_rate"] = ds.trials.sample_rate;
    meta["pre_samples"] = ds.trials.pre_samples;
    meta["channels"] = ds.trials.channels;
    meta["regions"] = ds.trials.regions;
    meta["stimulus_ids"] = ds.trials.stimulus_ids;
    meta["repetition_index"] = ds.trials.repetition_index;
    meta["pair_image"] = ds.pair_image;
    meta["val_indices"] = ds.val_indices;

    std::vector<Section> sections;
    const std::string meta_text = meta.dump();
    sections.push_back({kTagMeta, std::vector<uint8_t>(meta_text.begin(), meta_text.end())});

    Section signals{kTagSignals, {}};
    for (const Tensor& e : ds.trials.epochs) put_f64s(signals.payload, e.data());
    sections.push_back(std::move(signals));

    Section images{kTagImages, {}};
    for (const Tensor& img : ds.images) put_f64s(images.payload, img.data());
    sections.push_back(std::move(images));

    Section embeds{kTagEmbeds, {}};
    put_f64s(embeds.payload, ds.image_embeds.data());
    sections.push_back(std::move(embeds));

    Section proj{kTagProjection, {}};
    put_f64s(proj.payload, ds.projection.data());
    sections.push_back(std::move(proj));

    write_container(path, sections);
}

namespace {

const Section& find_section(const std::vector<Section>& sections, uint32_t tag,
                            const std::string& path) {
    for (const Section& s : sections) {
        if (s.tag == tag) return s;
    }
    throw config_error("container '" + path + "': missing section tag " + std::to_string(tag));
}

std::vector<double> section_f64s(const Section& s, size_t expect, const std::string& what) {
    if (s.payload.size() != expect * sizeof(double)) {
        throw config_error(what + ": expected " + std::to_string(expect) + " doubles, have " +
                           std::to_string(s.payload.size() / sizeof(double)));
    }
    std::vector<double> v(expect);
    std::memcpy(v.data(), s.payload.data(), s.payload.size());
    return v;
}

json section_json(const Section& s, const std::string& path) {
    try {
        return json::parse(std::string(s.payload.begin(), s.payload.end()));
    } catch (const json::exception& e) {
        throw config_error("container '" + path + "': bad metadata: " + e.what());
    }
}

} // namespace

Dataset load_dataset(const std::string& path) {
    const auto sections = read_container(path);
    const json meta = section_json(find_section(sections, kTagMeta, path), path);
    if (meta.value("kind", "") != "dataset") {
        throw config_error("container '" + path + "': not a dataset file");
    }
    Dataset ds;
    try {
        meta.at("cfg").get_to(ds.cfg);
        ds.seed = meta.at("seed").get<uint64_t>();
        ds.trials.subject_id = meta.at("subject_id").get<std::string>();
        ds.trials.sample_rate = meta.at("sample_rate").get<double>();
        ds.trials.pre_samples = meta.at("pre_samples").get<int>();
        meta.at("channels").get_to(ds.trials.channels);
        meta.at("regions").get_to(ds.trials.regions);
        meta.at("stimulus_ids").get_to(ds.trials.stimulus_ids);
        meta.at("repetition_index").get_to(ds.trials.repetition_index);
        meta.at("pair_image").get_to(ds.pair_image);
        meta.at("val_indices").get_to(ds.val_indices);
    } catch (const json::exception& e) {
        throw config_error("container '" + path + "': bad metadata: " + e.what());
    }
    const int n = ds.cfg.classes * ds.cfg.pairs_per_class;
    const int c_ch = ds.cfg.channels, t = ds.cfg.samples, s = ds.cfg.image_size, d = ds.cfg.embed_dim;
    const int pix = 3 * s * s;
    {
        const auto v = section_f64s(find_section(sections, kTagSignals, path),
                                    static_cast<size_t>(n) * c_ch * t, "signals in '" + path + "'");
        for (int i = 0; i < n; ++i) {
            std::vector<double> one(v.begin() + static_cast<int64_t>(i) * c_ch * t,
                                    v.begin() + static_cast<int64_t>(i + 1) * c_ch * t);
            ds.trials.epochs.push_back(Tensor::from({c_ch, t}, std::move(one)));
        }
    }
    {
        const auto v = section_f64s(find_section(sections, kTagImages, path),
                                    static_cast<size_t>(n) * pix, "images in '" + path + "'");
        for (int i = 0; i < n; ++i) {
            std::vector<double> one(v.begin() + static_cast<int64_t>(i) * pix,
                                    v.begin() + static_cast<int64_t>(i + 1) * pix);
            ds.images.push_back(Tensor::from({3, s, s}, std::move(one)));
        }
    }
    ds.image_embeds = Tensor::from(
        {n, d}, section_f64s(find_section(sections, kTagEmbeds, path), static_cast<size_t>(n) * d,
                             "embeddings in '" + path + "'"));
    ds.projection = Tensor::from(
        {d, pix}, section_f64s(find_section(sections, kTagProjection, path),
                               static_cast<size_t>(d) * pix, "projection in '" + path + "'"));
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::vector<uint8_t> body;
    put_scalar<uint32_t>(body, ck.version);
    put_scalar<uint64_t>(body, ck.config_hash);
    put_scalar<int32_t>(body, ck.epoch);
    put_scalar<int64_t>(body, ck.opt_steps);
    put_scalar<uint32_t>(body, static_cast<uint32_t>(ck.params.size()));
    for (const auto& [name, t] : ck.params) {
        put_string(body, name);
        put_scalar<uint32_t>(body, static_cast<uint32_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) put_scalar<int32_t>(body, t.extent(i));
        put_f64s(body, t.data());
    }
    put_scalar<uint32_t>(body, static_cast<uint32_t>(ck.opt_state.size()));
    for (const auto& [name, slot] : ck.opt_state) {
        put_string(body, name);
        put_scalar<uint64_t>(body, static_cast<uint64_t>(slot.m.size()));
        put_f64s(body, slot.m);
        put_f64s(body, slot.v);
    }

    std::vector<uint8_t> out;
    out.insert(out.end(), {'A', 'V', 'C', 'P'});
    out.insert(out.end(), body.begin(), body.end());
    put_scalar<uint32_t>(out, payload_crc(body));
    write_file_bytes(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    const std::string what = "checkpoint '" + path + "'";
    if (bytes.size() < 8 || std::string(bytes.begin(), bytes.begin() + 4) != "AVCP") {
        throw config_error(what + ": bad magic");
    }
    std::vector<uint8_t> body(bytes.begin() + 4, bytes.end() - 4);
    uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
    if (stored_crc != payload_crc(body)) throw config_error(what + ": checksum mismatch");

    ByteReader r(body.data(), body.size(), what);
    Checkpoint ck;
    ck.version = r.scalar<uint32_t>();
    if (ck.version != 1) {
        throw config_error(what + ": unsupported version " + std::to_string(ck.version));
    }
    ck.config_hash = r.scalar<uint64_t>();
    ck.epoch = r.scalar<int32_t>();
    ck.opt_steps = r.scalar<int64_t>();
    const uint32_t nparams = r.scalar<uint32_t>();
    for (uint32_t i = 0; i < nparams; ++i) {
        const std::string name = r.str();
        const uint32_t ndim = r.scalar<uint32_t>();
        std::vector<int> shape;
        size_t numel = 1;
        for (uint32_t k = 0; k < ndim; ++k) {
            const int32_t e = r.scalar<int32_t>();
            if (e < 1) throw config_error(what + ": bad extent for '" + name + "'");
            shape.push_back(e);
            numel *= static_cast<size_t>(e);
        }
        ck.params.emplace(name, Tensor::from(std::move(shape), r.f64s(numel)));
    }
    const uint32_t nstate = r.scalar<uint32_t>();
    for (uint32_t i = 0; i < nstate; ++i) {
        const std::string name = r.str();
        const uint64_t len = r.scalar<uint64_t>();
        AdamW::Slot slot;
        slot.m = r.f64s(static_cast<size_t>(len));
        slot.v = r.f64s(static_cast<size_t>(len));
        ck.opt_state.emplace(name, std::move(slot));
    }
    if (r.remaining() != 0) throw config_error(what + ": trailing bytes");
    return ck;
}

// ---------------------------------------------------------------------------
// Emission helpers

std::string fmt_double(double v) {
    if (std::isfinite(v)) return json(v).dump(); // shortest round-trip decimal
    return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    if (header.empty()) throw contract_error("write_csv: header row is mandatory");
    std::string text;
    for (size_t i = 0; i < header.size(); ++i) {
        if (i) text += ',';
        text += header[i];
    }
    text += '\n';
    for (const auto& row : rows) {
        if (row.size() != header.size()) {
            throw contract_error("write_csv: row width " + std::to_string(row.size()) +
                                 " does not match header width " + std::to_string(header.size()));
        }
        for (size_t i = 0; i < row.size(); ++i) {
            if (i) text += ',';
            text += row[i];
        }
        text += '\n';
    }
    write_file_bytes(path, std::vector<uint8_t>(text.begin(), text.end()));
}

void write_ppm(const std::string& path, const Tensor& image) {
    if (image.ndim() != 3 || image.extent(0) != 3) {
        throw contract_error("write_ppm: expected a [3 x h x w] image, got " + image.shape_str());
    }
    const int h = image.extent(1), w = image.extent(2);
    std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = std::min(
                    1.0, std::max(0.0, image.data()[static_cast<size_t>((c * h + y) * w + x)]));
                out.push_back(static_cast<uint8_t>(std::lround(v * 255.0)));
            }
        }
    }
    write_file_bytes(path, out);
}

Tensor read_ppm(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    size_t off = 0;
    auto token = [&]() -> std::string {
        while (off < bytes.size() && std::isspace(bytes[off])) ++off;
        std::string tok;
        while (off < bytes.size() && !std::isspace(bytes[off])) tok += static_cast<char>(bytes[off++]);
        return tok;
    };
    if (token() != "P6") throw config_error("'" + path + "': not a P6 pixmap");
    const int w = std::stoi(token()), h = std::stoi(token()), maxval = std::stoi(token());
    if (w < 1 || h < 1 || maxval != 255) throw config_error("'" + path + "': unsupported pixmap");
    ++off; // single whitespace after maxval
    if (bytes.size() - off < static_cast<size_t>(3 * w * h)) {
        throw config_error("'" + path + "': truncated pixel data");
    }
    std::vector<double> v(static_cast<size_t>(3 * h * w));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                v[static_cast<size_t>(c * h * w + y * w + x)] =
                    bytes[off + static_cast<size_t>((y * w + x) * 3 + c)] / 255.0;
            }
        }
    }
    return Tensor::from({3, h, w}, std::move(v));
}

// ---------------------------------------------------------------------------
// Stage runners

namespace {

std::string artifact(const RunConfig& cfg, const std::string& rel) {
    return (fs::path(cfg.out_dir) / rel).string();
}

void require_artifact(const RunConfig& cfg, const std::string& rel, const std::string& stage_desc,
                      const std::string& what, const std::string& producer) {
    const std::string path = artifact(cfg, rel);
    if (!fs::exists(path)) {
        throw config_error(stage_desc + " requires " + what + " (" + path + "); run " + producer +
                           " first");
    }
}

void load_into(ParamStore& ps, const Checkpoint& ck) {
    for (const auto& [name, t] : ck.params) {
        Tensor& p = ps.create(name, t.shape());
        p.data_mut() = t.data();
    }
}

Checkpoint make_checkpoint(const ParamStore& ps, uint64_t hash, int epoch, int64_t steps,
                           std::map<std::string, AdamW::Slot> state) {
    Checkpoint ck;
    ck.config_hash = hash;
    ck.epoch = epoch;
    ck.opt_steps = steps;
    for (const auto& [name, t] : ps.all()) ck.params.emplace(name, Tensor::from(t.shape(), t.data()));
    ck.opt_state = std::move(state);
    return ck;
}

void write_config_snapshot(const RunConfig& cfg, const std::string& rel) {
    const std::string text = to_canonical_json(cfg) + "\n";
    write_file_bytes(artifact(cfg, rel), std::vector<uint8_t>(text.begin(), text.end()));
}

// L2-normalized copy of a [d] embedding, detached from any tape.
Tensor unit_embed(const Tensor& e) {
    double norm = 0.0;
    for (double v : e.data()) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw numeric_error("pipeline: zero-norm EEG embedding");
    std::vector<double> v = e.data();
    for (double& x : v) x /= norm;
    return Tensor::from(e.shape(), std::move(v));
}

tok::Codebook codebook_of(const ParamStore& tok_ps) { return tok::Codebook{tok_ps.get("vq.codebook")}; }

// Derived per-stage seeds; a single RunConfig seed pins the whole run.
uint64_t stage_seed(const RunConfig& cfg, uint64_t salt) { return hash_mix(cfg.seed, salt); }

constexpr uint64_t kSaltTokInit = 11;
constexpr uint64_t kSaltTokTrain = 12;
constexpr uint64_t kSaltEncInit = 21;
constexpr uint64_t kSaltAlignTrain = 22;
constexpr uint64_t kSaltNspInit = 31;
constexpr uint64_t kSaltNspShuffle = 32;
constexpr uint64_t kSaltNspDrop = 33;
constexpr uint64_t kSaltGenerate = 41;

std::map<std::string, std::vector<double>> snapshot_params(const ParamStore& ps) {
    std::map<std::string, std::vector<double>> snap;
    for (const auto& [name, t] : ps.all()) snap.emplace(name, t.data());
    return snap;
}

void restore_params(ParamStore& ps, const std::map<std::string, std::vector<double>>& snap) {
    for (auto& [name, t] : ps.all()) t.data_mut() = snap.at(name);
}

std::vector<int> train_rows(const Dataset& ds) {
    std::vector<char> is_val(static_cast<size_t>(ds.pair_count()), 0);
    for (int v : ds.val_indices) is_val[static_cast<size_t>(v)] = 1;
    std::vector<int> rows;
    for (int i = 0; i < ds.pair_count(); ++i) {
        if (!is_val[static_cast<size_t>(i)]) rows.push_back(i);
    }
    return rows;
}

} // namespace

int64_t param_count(const ParamStore& ps, const std::string& prefix) {
    int64_t n = 0;
    for (const auto& [name, t] : ps.all()) {
        if (name.rfind(prefix, 0) == 0) n += t.numel();
    }
    return n;
}

void run_synth(const RunConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    const Dataset ds = synth_dataset(cfg.data, cfg.seed);
    save_dataset(ds, artifact(cfg, "dataset.avds"));
}

tok::TokTrainResult run_train_tokenizer(const RunConfig& cfg) {
    cfg.validate();
    require_artifact(cfg, "dataset.avds", "tokenizer training", "the dataset", "synth");
    const Dataset ds = load_dataset(artifact(cfg, "dataset.avds"));

    std::vector<Tensor> images;
    for (int row : train_rows(ds)) images.push_back(ds.images[static_cast<size_t>(row)]);

    ParamStore ps;
    tok::init_tokenizer(ps, cfg.tokenizer, stage_seed(cfg, kSaltTokInit));
    tok::TokTrainConfig tt = cfg.tok_train;
    tt.seed = stage_seed(cfg, kSaltTokTrain);

    std::map<std::string, AdamW::Slot> state;
    int64_t steps = 0;
    const tok::TokTrainResult res = tok::train_vqvae(images, cfg.tokenizer, tt, ps, "vq.", &state, &steps);

    save_checkpoint(make_checkpoint(ps, config_hash(cfg), tt.epochs, steps, std::move(state)),
                    artifact(cfg, "tokenizer.avcp"));
    std::vector<std::vector<std::string>> rows;
    for (size_t i = 0; i < res.recon_mse.size(); ++i) {
        rows.push_back({std::to_string(i + 1), fmt_double(res.recon_mse[i])});
    }
    write_csv(artifact(cfg, "tokenizer_curve.csv"), {"epoch", "recon_mse"}, rows);
    write_config_snapshot(cfg, "tokenizer_config.json");
    return res;
}

align::AlignResult run_train_align(const RunConfig& cfg) {
    cfg.validate();
    require_artifact(cfg, "dataset.avds", "alignment training", "the dataset", "synth");
    const Dataset ds = load_dataset(artifact(cfg, "dataset.avds"));

    ParamStore ps;
    eeg::init_encoder(ps, cfg.encoder, ds.cfg.channels, ds.cfg.samples, stage_seed(cfg, kSaltEncInit));
    align::AlignTrainConfig at = cfg.align_train;
    at.seed = stage_seed(cfg, kSaltAlignTrain);

    std::map<std::string, AdamW::Slot> state;
    int64_t steps = 0;
    const align::AlignResult res = align::train_alignment(ds.trials.epochs, ds.image_embeds,
                                                          cfg.encoder, ps, at, ds.val_indices,
                                                          &state, &steps);

    save_checkpoint(make_checkpoint(ps, config_hash(cfg), at.epochs, steps, std::move(state)),
                    artifact(cfg, "align.avcp"));
    std::vector<std::vector<std::string>> rows;
    for (size_t i = 0; i < res.train_loss.size(); ++i) {
        const std::string top1 = i < res.val_top1.size() ? fmt_double(res.val_top1[i]) : "nan";
        rows.push_back({std::to_string(i + 1), fmt_double(res.train_loss[i]), top1});
    }
    write_csv(artifact(cfg, "align_curve.csv"), {"epoch", "train_loss", "val_top1"}, rows);
    write_config_snapshot(cfg, "align_config.json");
    return res;
}

NspTrainResult run_train_nsp(const RunConfig& cfg) {
    cfg.validate();
    require_artifact(cfg, "dataset.avds", "nsp training", "the dataset", "synth");
    require_artifact(cfg, "tokenizer.avcp", "nsp training", "the tokenizer checkpoint",
                     "train-tokenizer");
    require_artifact(cfg, "align.avcp", "nsp training", "the alignment checkpoint", "train-align");
    const Dataset ds = load_dataset(artifact(cfg, "dataset.avds"));
    ParamStore tok_ps, enc_ps;
    load_into(tok_ps, load_checkpoint(artifact(cfg, "tokenizer.avcp")));
    load_into(enc_ps, load_checkpoint(artifact(cfg, "align.avcp")));

    std::vector<int> rows = train_rows(ds);
    if (cfg.nsp_train.overfit_pairs > 0 &&
        cfg.nsp_train.overfit_pairs < static_cast<int>(rows.size())) {
        rows.resize(static_cast<size_t>(cfg.nsp_train.overfit_pairs));
    }

    // Frozen prerequisites: embeddings from the aligned encoder, token stacks
    // from the trained tokenizer.
    const tok::ScaleSchedule schedule = cfg.tokenizer.schedule();
    const tok::Codebook book = codebook_of(tok_ps);
    std::vector<nsp::NspSample> samples;
    for (int row : rows) {
        nsp::NspSample smp;
        smp.embed = unit_embed(eeg::encode(ds.trials.epochs[static_cast<size_t>(row)], cfg.encoder, enc_ps));
        smp.stack = tok::encode_tokens(
            tok::encode_image(ds.images[static_cast<size_t>(row)], cfg.tokenizer, tok_ps), schedule,
            book);
        samples.push_back(std::move(smp));
    }

    ParamStore nsp_ps;
    nsp::init_nsp(nsp_ps, cfg.nsp, stage_seed(cfg, kSaltNspInit));
    AdamWConfig ocfg;
    ocfg.lr = cfg.nsp_train.lr;
    ocfg.min_lr = cfg.nsp_train.min_lr;
    ocfg.beta1 = cfg.nsp_train.beta1;
    ocfg.beta2 = cfg.nsp_train.beta2;
    ocfg.weight_decay = cfg.nsp_train.weight_decay;
    AdamW opt(nsp_ps, ocfg);

    const int64_t spe =
        (static_cast<int64_t>(samples.size()) + cfg.nsp_train.batch_size - 1) / cfg.nsp_train.batch_size;
    const int64_t total_steps = spe * cfg.nsp_train.epochs;
    const int64_t warm_steps = std::min(spe * cfg.nsp_train.warmup_epochs, total_steps);

    NspTrainResult res;
    int64_t step = 0;
    auto good = snapshot_params(nsp_ps);
    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    for (int ep = 0; ep < cfg.nsp_train.epochs && !res.diverged; ++ep) {
        Rng shuffle_rng(hash_mix(stage_seed(cfg, kSaltNspShuffle), static_cast<uint64_t>(ep) + 1));
        shuffle_rng.shuffle(order);
        Rng drop_rng(hash_mix(stage_seed(cfg, kSaltNspDrop), static_cast<uint64_t>(ep) + 1));
        double loss_sum = 0.0;
        int batches = 0;
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.nsp_train.batch_size)) {
            std::vector<nsp::NspSample> batch;
            for (size_t i = at;
                 i < std::min(order.size(), at + static_cast<size_t>(cfg.nsp_train.batch_size)); ++i) {
                batch.push_back(samples[order[i]]);
            }
            try {
                GradTape tape;
                TapeScope scope(tape);
                Tensor loss = nsp::train_step(batch, cfg.nsp, nsp_ps, drop_rng);
                const double lv = loss.value();
                if (!std::isfinite(lv)) throw numeric_error("run_train_nsp: non-finite loss");
                tape.backward(loss);
                opt.step(tape, cosine_lr(step, total_steps, warm_steps, cfg.nsp_train.lr,
                                         cfg.nsp_train.min_lr));
                loss_sum += lv;
            } catch (const numeric_error&) {
                restore_params(nsp_ps, good);
                res.diverged = true;
                break;
            }
            ++batches;
            ++step;
        }
        if (res.diverged) break;
        res.loss.push_back(loss_sum / static_cast<double>(batches));
        good = snapshot_params(nsp_ps);
    }
    res.steps = step;

    save_checkpoint(make_checkpoint(nsp_ps, config_hash(cfg), static_cast<int>(res.loss.size()),
                                    opt.steps_taken(), opt.state()),
                    artifact(cfg, "nsp.avcp"));
    std::vector<std::vector<std::string>> rows_csv;
    for (size_t i = 0; i < res.loss.size(); ++i) {
        rows_csv.push_back({std::to_string(i + 1), fmt_double(res.loss[i])});
    }
    write_csv(artifact(cfg, "nsp_curve.csv"), {"epoch", "loss"}, rows_csv);
    write_config_snapshot(cfg, "nsp_config.json");
    return res;
}

GenerateSummary run_generate(const RunConfig& cfg) {
    cfg.validate();
    require_artifact(cfg, "dataset.avds", "generation", "the dataset", "synth");
    require_artifact(cfg, "tokenizer.avcp", "generation", "the tokenizer checkpoint",
                     "train-tokenizer");
    require_artifact(cfg, "align.avcp", "generation", "the alignment checkpoint", "train-align");
    require_artifact(cfg, "nsp.avcp", "generation", "the decoder checkpoint", "train-nsp");
    const Dataset ds = load_dataset(artifact(cfg, "dataset.avds"));
    ParamStore tok_ps, enc_ps, nsp_ps;
    load_into(tok_ps, load_checkpoint(artifact(cfg, "tokenizer.avcp")));
    load_into(enc_ps, load_checkpoint(artifact(cfg, "align.avcp")));
    load_into(nsp_ps, load_checkpoint(artifact(cfg, "nsp.avcp")));

    fs::create_directories(fs::path(cfg.out_dir) / "gen");
    const int k_scales = cfg.tokenizer.schedule().K();
    json manifest;
    manifest["count"] = static_cast<int>(ds.val_indices.size());
    manifest["scales"] = k_scales;
    manifest["samples"] = json::array();

    Section recons{kTagRecons, {}};
    char buf[64];
    for (size_t i = 0; i < ds.val_indices.size(); ++i) {
        const int row = ds.val_indices[i];
        const Tensor e = unit_embed(eeg::encode(ds.trials.epochs[static_cast<size_t>(row)], cfg.encoder, enc_ps));
        const nsp::GenResult g =
            nsp::generate(e, cfg.nsp, nsp_ps, cfg.tokenizer, tok_ps,
                          hash_mix(stage_seed(cfg, kSaltGenerate), static_cast<uint64_t>(row)));

        std::snprintf(buf, sizeof(buf), "sample_%03zu", i);
        const std::string stem = std::string("gen/") + buf;
        json entry;
        entry["sample"] = static_cast<int>(i);
        entry["pair"] = row;
        entry["steps"] = g.steps;
        json scale_files = json::array();
        for (int k = 0; k < k_scales; ++k) {
            const std::string rel = stem + "_scale_" + std::to_string(k + 1) + ".ppm";
            write_ppm(artifact(cfg, rel), g.scale_images[static_cast<size_t>(k)]);
            scale_files.push_back(rel);
        }
        const std::string final_rel = stem + "_final.ppm";
        write_ppm(artifact(cfg, final_rel), g.image);
        entry["files"] = {{"final", final_rel}, {"scales", scale_files}, {"tokens", stem + "_tokens.bin"}};

        std::vector<uint8_t> tk;
        tk.insert(tk.end(), {'A', 'V', 'T', 'K'});
        put_scalar<uint32_t>(tk, static_cast<uint32_t>(k_scales));
        for (int k = 0; k < k_scales; ++k) {
            const auto [h, w] = cfg.tokenizer.schedule().sizes[static_cast<size_t>(k)];
            put_scalar<uint32_t>(tk, static_cast<uint32_t>(h));
            put_scalar<uint32_t>(tk, static_cast<uint32_t>(w));
            for (int idx : g.tokens[static_cast<size_t>(k)]) put_scalar<uint32_t>(tk, static_cast<uint32_t>(idx));
        }
        write_file_bytes(artifact(cfg, stem + "_tokens.bin"), tk);

        put_f64s(recons.payload, g.image.data());
        manifest["samples"].push_back(entry);
    }

    json meta;
    meta["kind"] = "recons";
    meta["count"] = static_cast<int>(ds.val_indices.size());
    meta["image_size"] = ds.cfg.image_size;
    meta["pairs"] = ds.val_indices;
    const std::string meta_text = meta.dump();
    write_container(artifact(cfg, "gen/recons.avds"),
                    {{kTagMeta, std::vector<uint8_t>(meta_text.begin(), meta_text.end())},
                     std::move(recons)});

    const std::string manifest_text = manifest.dump(2) + "\n";
    write_file_bytes(artifact(cfg, "gen/manifest.json"),
                     std::vector<uint8_t>(manifest_text.begin(), manifest_text.end()));
    return GenerateSummary{static_cast<int>(ds.val_indices.size()), k_scales};
}

EvalSummary run_eval(const RunConfig& cfg) {
    cfg.validate();
    require_artifact(cfg, "dataset.avds", "evaluation", "the dataset", "synth");
    require_artifact(cfg, "align.avcp", "evaluation", "the alignment checkpoint", "train-align");
    const Dataset ds = load_dataset(artifact(cfg, "dataset.avds"));
    if (ds.val_indices.empty()) throw config_error("evaluation: the dataset has no validation split");
    const int s = ds.cfg.image_size;
    const int pix = 3 * s * s;
    const int n_val = static_cast<int>(ds.val_indices.size());

    std::vector<Tensor> recon;
    if (cfg.eval_self_test) {
        for (int row : ds.val_indices) {
            recon.push_back(ds.images[static_cast<size_t>(ds.pair_image[static_cast<size_t>(row)])]);
        }
    } else {
        require_artifact(cfg, "gen/recons.avds", "evaluation", "generated reconstructions",
                         "generate");
        const std::string rpath = artifact(cfg, "gen/recons.avds");
        const auto sections = read_container(rpath);
        const json meta = section_json(find_section(sections, kTagMeta, rpath), rpath);
        if (meta.value("kind", "") != "recons") {
            throw config_error("container '" + rpath + "': not a reconstruction file");
        }
        std::vector<int> pairs;
        meta.at("pairs").get_to(pairs);
        if (pairs != ds.val_indices || meta.value("image_size", -1) != s) {
            throw config_error("evaluation: generated set does not match the dataset's validation "
                               "split; rerun generate");
        }
        const auto v = section_f64s(find_section(sections, kTagRecons, rpath),
                                    static_cast<size_t>(n_val) * pix, "reconstructions in '" + rpath + "'");
        for (int i = 0; i < n_val; ++i) {
            std::vector<double> one(v.begin() + static_cast<int64_t>(i) * pix,
                                    v.begin() + static_cast<int64_t>(i + 1) * pix);
            recon.push_back(Tensor::from({3, s, s}, std::move(one)));
        }
    }

    std::vector<Tensor> truth;
    for (int row : ds.val_indices) {
        truth.push_back(ds.images[static_cast<size_t>(ds.pair_image[static_cast<size_t>(row)])]);
    }

    EvalSummary out;
    std::vector<std::vector<std::string>> report_rows;
    std::vector<double> recon_flat, truth_flat;
    double pc_sum = 0.0, ss_sum = 0.0;
    for (int i = 0; i < n_val; ++i) {
        const double pc = metrics::pixcorr(recon[static_cast<size_t>(i)], truth[static_cast<size_t>(i)]);
        const double ss = metrics::ssim(recon[static_cast<size_t>(i)], truth[static_cast<size_t>(i)]);
        pc_sum += pc;
        ss_sum += ss;
        report_rows.push_back({std::to_string(i), std::to_string(ds.val_indices[static_cast<size_t>(i)]),
                               fmt_double(pc), fmt_double(ss)});
        recon_flat.insert(recon_flat.end(), recon[static_cast<size_t>(i)].data().begin(),
                          recon[static_cast<size_t>(i)].data().end());
        truth_flat.insert(truth_flat.end(), truth[static_cast<size_t>(i)].data().begin(),
                          truth[static_cast<size_t>(i)].data().end());
    }
    out.recon.pixcorr = pc_sum / n_val;
    out.recon.ssim = ss_sum / n_val;
    out.recon.two_way = metrics::two_way_identification(Tensor::from({n_val, pix}, std::move(recon_flat)),
                                                        Tensor::from({n_val, pix}, std::move(truth_flat)));

    // Retrieval of the matching image embedding from the validation gallery.
    ParamStore enc_ps;
    load_into(enc_ps, load_checkpoint(artifact(cfg, "align.avcp")));
    std::vector<Tensor> val_eps;
    for (int row : ds.val_indices) val_eps.push_back(ds.trials.epochs[static_cast<size_t>(row)]);
    const Tensor queries = eeg::encode_batch(val_eps, cfg.encoder, enc_ps);
    const Tensor gallery = ops::gather_rows(ds.image_embeds, ds.val_indices);
    std::vector<int> match(static_cast<size_t>(n_val));
    std::iota(match.begin(), match.end(), 0);
    out.retrieval = metrics::retrieval_topk(queries, gallery, match, std::min(5, n_val));

    fs::create_directories(fs::path(cfg.out_dir) / "eval");
    write_csv(artifact(cfg, "eval/recon_report.csv"), {"sample", "pair", "pixcorr", "ssim"},
              report_rows);
    std::vector<std::vector<std::string>> retr_rows;
    for (int i = 0; i < n_val; ++i) {
        retr_rows.push_back({std::to_string(i), std::to_string(ds.val_indices[static_cast<size_t>(i)]),
                             std::to_string(out.retrieval.ranks[static_cast<size_t>(i)])});
    }
    write_csv(artifact(cfg, "eval/retrieval.csv"), {"query", "pair", "rank"}, retr_rows);
    write_csv(artifact(cfg, "eval/summary.csv"), {"metric", "value"},
              {{"pixcorr", fmt_double(out.recon.pixcorr)},
               {"ssim", fmt_double(out.recon.ssim)},
               {"two_way", fmt_double(out.recon.two_way)},
               {"retrieval_top1", fmt_double(out.retrieval.top1)},
               {"retrieval_top5", fmt_double(out.retrieval.top5)},
               {"n_way", std::to_string(out.retrieval.n_way)}});
    return out;
}

metrics::RegionScaleMatrix run_analyze(const RunConfig& cfg) {
    cfg.validate();
    require_artifact(cfg, "dataset.avds", "analysis", "the dataset", "synth");
    require_artifact(cfg, "tokenizer.avcp", "analysis", "the tokenizer checkpoint", "train-tokenizer");
    require_artifact(cfg, "align.avcp", "analysis", "the alignment checkpoint", "train-align");
    require_artifact(cfg, "nsp.avcp", "analysis", "the decoder checkpoint", "train-nsp");
    const Dataset ds = load_dataset(artifact(cfg, "dataset.avds"));
    if (ds.val_indices.empty()) throw config_error("analysis: the dataset has no validation split");
    ParamStore tok_ps, enc_ps;
    load_into(tok_ps, load_checkpoint(artifact(cfg, "tokenizer.avcp")));
    load_into(enc_ps, load_checkpoint(artifact(cfg, "align.avcp")));

    const int c_ch = ds.cfg.channels, d = ds.cfg.embed_dim;
    const int pix = 3 * ds.cfg.image_size * ds.cfg.image_size;
    const tok::ScaleSchedule schedule = cfg.tokenizer.schedule();
    const tok::Codebook book = codebook_of(tok_ps);
    const int k_scales = schedule.K();

    std::vector<double> chan_acc(static_cast<size_t>(c_ch * d), 0.0);
    std::vector<std::vector<double>> scale_acc(static_cast<size_t>(k_scales),
                                               std::vector<double>(static_cast<size_t>(d), 0.0));
    for (int row : ds.val_indices) {
        const Tensor ce = eeg::encode_channels(ds.trials.epochs[static_cast<size_t>(row)], cfg.encoder, enc_ps);
        for (size_t i = 0; i < chan_acc.size(); ++i) chan_acc[i] += ce.data()[i];

        const Tensor f = tok::encode_image(
            ds.images[static_cast<size_t>(ds.pair_image[static_cast<size_t>(row)])], cfg.tokenizer, tok_ps);
        const tok::ResidualStack stack = tok::encode_tokens(f, schedule, book);
        for (int k = 0; k < k_scales; ++k) {
            const Tensor fk = tok::cumulative_feature(stack, k + 1);
            const Tensor img = tok::decode_feature(fk, cfg.tokenizer, tok_ps);
            for (int e = 0; e < d; ++e) {
                double dot = 0.0;
                for (int p = 0; p < pix; ++p) {
                    dot += ds.projection.data()[static_cast<size_t>(e * pix + p)] * img.data()[static_cast<size_t>(p)];
                }
                scale_acc[static_cast<size_t>(k)][static_cast<size_t>(e)] += dot;
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(ds.val_indices.size());
    for (double& v : chan_acc) v *= inv;
    std::vector<Tensor> scale_embeds;
    for (int k = 0; k < k_scales; ++k) {
        std::vector<double> v = scale_acc[static_cast<size_t>(k)];
        for (double& x : v) x *= inv;
        scale_embeds.push_back(Tensor::from({d}, std::move(v)));
    }

    const metrics::RegionScaleMatrix m = metrics::region_scale_similarity(
        Tensor::from({c_ch, d}, std::move(chan_acc)), ds.trials.regions, scale_embeds);

    std::vector<std::string> header = {"region"};
    for (int k = 1; k <= k_scales; ++k) header.push_back("sim_" + std::to_string(k));
    for (int k = 1; k <= k_scales; ++k) header.push_back("delta_" + std::to_string(k));
    std::vector<std::vector<std::string>> rows;
    for (size_t r = 0; r < m.regions.size(); ++r) {
        std::vector<std::string> row = {m.regions[r]};
        for (double v : m.sims[r]) row.push_back(fmt_double(v));
        for (double v : m.deltas[r]) row.push_back(fmt_double(v));
        rows.push_back(std::move(row));
    }
    fs::create_directories(fs::path(cfg.out_dir) / "analyze");
    write_csv(artifact(cfg, "analyze/region_scale.csv"), header, rows);
    return m;
}

BenchReport run_bench(const RunConfig& cfg, int runs, int warmups) {
    cfg.validate();
    if (runs < 1 || warmups < 0) throw config_error("run_bench: need runs >= 1 and warmups >= 0");
    require_artifact(cfg, "dataset.avds", "benchmarking", "the dataset", "synth");
    require_artifact(cfg, "tokenizer.avcp", "benchmarking", "the tokenizer checkpoint",
                     "train-tokenizer");
    require_artifact(cfg, "align.avcp", "benchmarking", "the alignment checkpoint", "train-align");
    require_artifact(cfg, "nsp.avcp", "benchmarking", "the decoder checkpoint", "train-nsp");
    const Dataset ds = load_dataset(artifact(cfg, "dataset.avds"));
    ParamStore tok_ps, enc_ps, nsp_ps;
    load_into(tok_ps, load_checkpoint(artifact(cfg, "tokenizer.avcp")));
    load_into(enc_ps, load_checkpoint(artifact(cfg, "align.avcp")));
    load_into(nsp_ps, load_checkpoint(artifact(cfg, "nsp.avcp")));

    BenchReport rep;
    rep.params_encoder = param_count(enc_ps, "");
    rep.params_tokenizer = param_count(tok_ps, "");
    rep.params_nsp = param_count(nsp_ps, "");
    rep.params_total = rep.params_encoder + rep.params_tokenizer + rep.params_nsp;
    rep.runs = runs;

    const int probe_row = ds.val_indices.empty() ? 0 : ds.val_indices.front();
    const Tensor e = unit_embed(eeg::encode(ds.trials.epochs[static_cast<size_t>(probe_row)], cfg.encoder, enc_ps));
    const uint64_t gen_seed = hash_mix(stage_seed(cfg, kSaltGenerate), 0xBE0CBE0Cull);

    for (int i = 0; i < warmups; ++i) {
        (void)nsp::generate(e, cfg.nsp, nsp_ps, cfg.tokenizer, tok_ps, gen_seed);
    }
    // Each repetition times a small batch and reports per-image milliseconds;
    // averaging inside the repetition tames single-call scheduler jitter.
    std::vector<double> ms;
    const int inner = 4;
    for (int i = 0; i < runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        for (int j = 0; j < inner; ++j) {
            const nsp::GenResult g = nsp::generate(e, cfg.nsp, nsp_ps, cfg.tokenizer, tok_ps, gen_seed);
            rep.steps = g.steps;
        }
        const auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() / inner);
    }
    std::sort(ms.begin(), ms.end());
    const size_t n = ms.size();
    rep.latency_ms_median = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
    const double q1 = ms[n / 4], q3 = ms[(3 * n) / 4];
    rep.latency_ms_iqr = q3 - q1;
    rep.spread = rep.latency_ms_median > 0 ? rep.latency_ms_iqr / rep.latency_ms_median : 0.0;

    // Analytic transformer cost of one generated image: two forward passes
    // (conditional + null) per scale over the growing prefix. Estimate only;
    // convolutional decode cost is excluded.
    const tok::ScaleSchedule schedule = cfg.tokenizer.schedule();
    const double h = cfg.nsp.hidden, mlp = cfg.nsp.mlp, v = cfg.nsp.vocab, depth = cfg.nsp.depth;
    int64_t prefix = 1;
    double flops = 0.0;
    for (int k = 0; k < schedule.K(); ++k) {
        const auto [hk, wk] = schedule.sizes[static_cast<size_t>(k)];
        prefix += static_cast<int64_t>(hk) * wk;
        const double l = static_cast<double>(prefix);
        const double per_pass = depth * (8.0 * l * h * h + 4.0 * l * l * h + 4.0 * l * h * mlp) +
                                2.0 * l * h * v;
        flops += 2.0 * per_pass;
    }
    rep.flops_estimate = flops;

    // Peak resident set, where /proc exposes it.
    std::ifstream status("/proc/self/status");
    std::string line;
    while (std::getline(status, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            rep.peak_rss_kb = std::strtoll(line.c_str() + 6, nullptr, 10);
            break;
        }
    }

    fs::create_directories(fs::path(cfg.out_dir) / "bench");
    write_csv(artifact(cfg, "bench/bench.csv"), {"metric", "value"},
              {{"params_encoder", std::to_string(rep.params_encoder)},
               {"params_tokenizer", std::to_string(rep.params_tokenizer)},
               {"params_nsp", std::to_string(rep.params_nsp)},
               {"params_total", std::to_string(rep.params_total)},
               {"steps", std::to_string(rep.steps)},
               {"runs", std::to_string(rep.runs)},
               {"latency_ms_median", fmt_double(rep.latency_ms_median)},
               {"latency_ms_iqr", fmt_double(rep.latency_ms_iqr)},
               {"spread", fmt_double(rep.spread)},
               {"flops_estimate", fmt_double(rep.flops_estimate)},
               {"peak_rss_kb", std::to_string(rep.peak_rss_kb)}});
    json jb;
    jb["params_encoder"] = rep.params_encoder;
    jb["params_tokenizer"] = rep.params_tokenizer;
    jb["params_nsp"] = rep.params_nsp;
    jb["params_total"] = rep.params_total;
    jb["steps"] = rep.steps;
    jb["runs"] = rep.runs;
    jb["latency_ms_median"] = rep.latency_ms_median;
    jb["latency_ms_iqr"] = rep.latency_ms_iqr;
    jb["spread"] = rep.spread;
    jb["flops_estimate"] = rep.flops_estimate;
    jb["peak_rss_kb"] = rep.peak_rss_kb;
    const std::string jtext = jb.dump(2) + "\n";
    write_file_bytes(artifact(cfg, "bench/bench.json"), std::vector<uint8_t>(jtext.begin(), jtext.end()));
    return rep;
}

SweepSummary run_sweep(const RunConfig& base, const std::vector<uint64_t>& seeds) {
    base.validate();
    if (seeds.empty()) throw config_error("run_sweep: need at least one seed");
    SweepSummary sum;
    sum.seeds = seeds;
    sum.metric_names = {"val_top1", "pixcorr", "ssim", "two_way", "retrieval_top1"};
    sum.values.assign(sum.metric_names.size(), {});

    std::vector<std::vector<std::string>> rows;
    for (uint64_t seed : seeds) {
        RunConfig cfg = base;
        cfg.seed = seed;
        cfg.out_dir = (fs::path(base.out_dir) / "sweep" / ("seed_" + std::to_string(seed))).string();
        run_synth(cfg);
        run_train_tokenizer(cfg);
        const align::AlignResult ar = run_train_align(cfg);
        run_train_nsp(cfg);
        run_generate(cfg);
        const EvalSummary ev = run_eval(cfg);
        const double val_top1 = ar.val_top1.empty() ? 0.0 : ar.val_top1.back();
        const std::vector<double> metric_vals = {val_top1, ev.recon.pixcorr, ev.recon.ssim,
                                                 ev.recon.two_way, ev.retrieval.top1};
        std::vector<std::string> row = {std::to_string(seed)};
        for (size_t m = 0; m < metric_vals.size(); ++m) {
            sum.values[m].push_back(metric_vals[m]);
            row.push_back(fmt_double(metric_vals[m]));
        }
        rows.push_back(std::move(row));
    }

    for (size_t m = 0; m < sum.metric_names.size(); ++m) {
        const auto& vals = sum.values[m];
        const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        sum.mean.push_back(mean);
        sum.sd.push_back(vals.size() > 1 ? std::sqrt(var / (vals.size() - 1)) : 0.0);
    }

    fs::create_directories(fs::path(base.out_dir) / "sweep");
    std::vector<std::string> header = {"seed"};
    for (const auto& nm : sum.metric_names) header.push_back(nm);
    write_csv((fs::path(base.out_dir) / "sweep" / "sweep.csv").string(), header, rows);
    std::vector<std::vector<std::string>> srows;
    for (size_t m = 0; m < sum.metric_names.size(); ++m) {
        srows.push_back({sum.metric_names[m], fmt_double(sum.mean[m]), fmt_double(sum.sd[m])});
    }
    write_csv((fs::path(base.out_dir) / "sweep" / "sweep_summary.csv").string(),
              {"metric", "mean", "sd"}, srows);
    return sum;
}

} // namespace neuroscale::pipeline
