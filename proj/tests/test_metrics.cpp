#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "neuroscale/metrics.hpp"
#include "neuroscale/rng.hpp"
#include "test_util.hpp"

using namespace neuroscale;
using namespace neuroscale::metrics;
using testutil::rand_tensor;

namespace {

Tensor fixture_image_a() {
    std::vector<double> v;
    for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 8; ++j) v.push_back(((3 * i + 5 * j) % 11) / 10.0);
    }
    return Tensor::from({8, 8}, std::move(v));
}

Tensor fixture_image_b() {
    std::vector<double> v;
    for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 8; ++j) v.push_back(((2 * i + 7 * j) % 13) / 12.0);
    }
    return Tensor::from({8, 8}, std::move(v));
}

// direct-definition SSIM over valid 11x11 Gaussian windows, written
// independently of the library implementation
double ref_ssim(const Tensor& a, const Tensor& b) {
    const int h = a.extent(0), w = a.extent(1);
    double g[11];
    double s = 0.0;
    for (int i = 0; i < 11; ++i) {
        g[i] = std::exp(-(i - 5.0) * (i - 5.0) / (2.0 * 1.5 * 1.5));
        s += g[i];
    }
    for (double& v : g) v /= s;
    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0.0;
    int count = 0;
    for (int i = 0; i + 11 <= h; ++i) {
        for (int j = 0; j + 11 <= w; ++j) {
            double ma = 0, mb = 0;
            for (int u = 0; u < 11; ++u) {
                for (int v = 0; v < 11; ++v) {
                    ma += g[u] * g[v] * a.at(i + u, j + v);
                    mb += g[u] * g[v] * b.at(i + u, j + v);
                }
            }
            double saa = 0, sbb = 0, sab = 0;
            for (int u = 0; u < 11; ++u) {
                for (int v = 0; v < 11; ++v) {
                    const double da = a.at(i + u, j + v) - ma;
                    const double db = b.at(i + u, j + v) - mb;
                    saa += g[u] * g[v] * da * da;
                    sbb += g[u] * g[v] * db * db;
                    sab += g[u] * g[v] * da * db;
                }
            }
            total += ((2 * ma * mb + c1) * (2 * sab + c2)) /
                     ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
            ++count;
        }
    }
    return total / count;
}

} // namespace

TEST_CASE("retrieval fixtures") {
    // M=1: the only candidate is always the match
    Tensor q = rand_tensor({3, 4}, 1, false);
    Tensor g1 = rand_tensor({1, 4}, 2, false);
    auto r = retrieval_topk(q, g1, {0, 0, 0}, 1);
    CHECK(r.top1 == 1.0);
    CHECK(r.n_way == 1);

    // queries equal to the gallery retrieve themselves
    Tensor g = rand_tensor({6, 5}, 3, false);
    auto self = retrieval_topk(g, g, {0, 1, 2, 3, 4, 5}, 5);
    CHECK(self.top1 == 1.0);
    CHECK(self.top5 == 1.0);

    // hand-built ranks (2,1,1): top1 = 2/3, top2 = 1
    Tensor gal = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor qs = Tensor::from({3, 3}, {0.5, 0.9, 0.0, 0.0, 1.0, 0.0, 0.1, 0.2, 0.95});
    auto hb = retrieval_topk(qs, gal, {0, 1, 2}, 2);
    CHECK(hb.ranks == std::vector<int>{2, 1, 1});
    CHECK(hb.top1 == doctest::Approx(2.0 / 3.0));
    CHECK(hb.topk == 1.0);
}

TEST_CASE("retrieval errors and rescaling invariance") {
    Tensor g = rand_tensor({4, 3}, 7, false);
    Tensor q = rand_tensor({2, 3}, 8, false);
    CHECK_THROWS_AS(retrieval_topk(q, g, {0, 1}, 5), config_error); // k > M
    CHECK_THROWS_AS(retrieval_topk(q, g, {0}, 1), contract_error);
    Tensor zq = Tensor::from({1, 3}, {0.0, 0.0, 0.0});
    CHECK_THROWS_WITH_AS(retrieval_topk(zq, g, {0}, 1), doctest::Contains("row 0"), metric_error);

    auto base = retrieval_topk(q, g, {2, 0}, 1);
    Tensor scaled = Tensor::from(g.shape(), g.data());
    for (int j = 0; j < 3; ++j) scaled.data_mut()[static_cast<size_t>(3 + j)] *= 7.5; // row 1
    for (int j = 0; j < 3; ++j) scaled.data_mut()[static_cast<size_t>(9 + j)] *= 0.01; // row 3
    auto after = retrieval_topk(q, scaled, {2, 0}, 1);
    CHECK(base.ranks == after.ranks);
}

TEST_CASE("retrieval on random embeddings matches chance at 200-way") {
    const int m = 200, n = 2000, d = 24;
    Tensor gallery = rand_tensor({m, d}, 101, false);
    Tensor queries = rand_tensor({n, d}, 102, false);
    std::vector<int> pairs(n);
    for (int i = 0; i < n; ++i) pairs[static_cast<size_t>(i)] = i % m;
    auto r = retrieval_topk(queries, gallery, pairs, 5);
    const double p = 1.0 / m;
    const double sigma = std::sqrt(p * (1.0 - p) / n);
    CHECK(std::abs(r.top1 - p) < 3.0 * sigma);
    CHECK(r.top1 <= r.top5);
    CHECK(r.top5 <= 1.0);
}

TEST_CASE("pixcorr fixtures") {
    Tensor a = rand_tensor({3, 5, 5}, 11, false);
    CHECK(pixcorr(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    std::vector<double> nv;
    for (double v : a.data()) nv.push_back(3.0 - 2.0 * v);
    Tensor neg = Tensor::from(a.shape(), std::move(nv));
    CHECK(pixcorr(a, neg) == doctest::Approx(-1.0).epsilon(1e-12));
    Tensor x = Tensor::from({4}, {0, 1, 2, 3});
    Tensor y = Tensor::from({4}, {1, 3, 2, 4});
    CHECK(pixcorr(x, y) == doctest::Approx(0.8).epsilon(1e-12));
    Tensor flat = Tensor::from({4}, {2, 2, 2, 2});
    CHECK_THROWS_AS(pixcorr(x, flat), metric_error);
    CHECK_THROWS_AS(pixcorr(x, a), contract_error);
}

TEST_CASE("ssim identities and fixtures") {
    // exact self-similarity, global and windowed paths
    Tensor small = fixture_image_a();
    CHECK(ssim(small, small) == 1.0);
    Tensor big = rand_tensor({16, 16}, 21, false);
    CHECK(ssim(big, big) == 1.0);

    // constant images 0 and 1: C1/(1+C1)
    Tensor z8 = Tensor::from({8, 8}, std::vector<double>(64, 0.0));
    Tensor o8 = Tensor::from({8, 8}, std::vector<double>(64, 1.0));
    const double want = 1e-4 / (1.0 + 1e-4);
    CHECK(ssim(z8, o8) == doctest::Approx(want).epsilon(1e-12));
    Tensor z16 = Tensor::from({16, 16}, std::vector<double>(256, 0.0));
    Tensor o16 = Tensor::from({16, 16}, std::vector<double>(256, 1.0));
    CHECK(ssim(z16, o16) == doctest::Approx(want).epsilon(1e-12));

    // symmetry
    Tensor b16 = rand_tensor({16, 16}, 22, false);
    CHECK(std::abs(ssim(big, b16) - ssim(b16, big)) < 1e-12);

    // golden 8x8 pair (global window), frozen from a long-double evaluation
    CHECK(ssim(fixture_image_a(), fixture_image_b()) ==
          doctest::Approx(-0.029808478755129826).epsilon(1e-9));

    // windowed path against the direct-definition implementation
    CHECK(std::abs(ssim(big, b16) - ref_ssim(big, b16)) < 1e-12);

    CHECK_THROWS_AS(ssim(small, big), contract_error);
}

TEST_CASE("ssim color input uses the luminance conversion") {
    Tensor rgb = rand_tensor({3, 12, 12}, 31, false);
    std::vector<double> y(144);
    for (int i = 0; i < 144; ++i) {
        y[static_cast<size_t>(i)] = 0.299 * rgb.data()[static_cast<size_t>(i)] +
                                    0.587 * rgb.data()[static_cast<size_t>(144 + i)] +
                                    0.114 * rgb.data()[static_cast<size_t>(288 + i)];
    }
    Tensor gray = Tensor::from({12, 12}, std::move(y));
    Tensor other = rand_tensor({12, 12}, 32, false);
    Tensor other3 = Tensor::from({3, 12, 12}, [&] {
        std::vector<double> v;
        for (int c = 0; c < 3; ++c) v.insert(v.end(), other.data().begin(), other.data().end());
        return v;
    }());
    // equal-channel color image has luminance equal to the channel itself
    CHECK(ssim(rgb, other3) == doctest::Approx(ssim(gray, other)).epsilon(1e-12));
}

TEST_CASE("two-way identification fixtures") {
    Tensor t = rand_tensor({5, 6}, 41, false);
    CHECK(two_way_identification(t, t) == 1.0);

    // identical recon rows: every comparison is symmetric, rate is exactly 1/2
    std::vector<double> same;
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 3; ++j) same.push_back(j + 1.0);
    }
    Tensor recon = Tensor::from({4, 3}, std::move(same));
    Tensor truth = rand_tensor({4, 3}, 42, false);
    CHECK(two_way_identification(recon, truth) == 0.5);

    CHECK_THROWS_AS(two_way_identification(rand_tensor({1, 3}, 43, false),
                                           rand_tensor({1, 3}, 44, false)),
                    contract_error);
    Tensor zed = Tensor::from({2, 2}, {0.0, 0.0, 1.0, 1.0});
    CHECK_THROWS_AS(two_way_identification(zed, rand_tensor({2, 2}, 45, false)), metric_error);
}

TEST_CASE("two-way identification matches brute-force enumeration at N=3") {
    Tensor r = rand_tensor({3, 4}, 51, false);
    Tensor t = rand_tensor({3, 4}, 52, false);
    auto cosine = [&](const Tensor& a, int i, const Tensor& b, int j) {
        double dot = 0, na = 0, nb = 0;
        for (int c = 0; c < 4; ++c) {
            dot += a.at(i, c) * b.at(j, c);
            na += a.at(i, c) * a.at(i, c);
            nb += b.at(j, c) * b.at(j, c);
        }
        return dot / std::sqrt(na * nb);
    };
    double score = 0;
    int n = 0;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            if (i == j) continue;
            double d1 = cosine(r, i, t, i) - cosine(r, i, t, j);
            double d2 = cosine(r, i, t, i) - cosine(r, j, t, i);
            score += d1 > 0 ? 1.0 : (d1 == 0 ? 0.5 : 0.0);
            score += d2 > 0 ? 1.0 : (d2 == 0 ? 0.5 : 0.0);
            n += 2;
        }
    }
    CHECK(two_way_identification(r, t) == doctest::Approx(score / n).epsilon(1e-15));
}

TEST_CASE("two-way on random independent features sits near one half") {
    Tensor r = rand_tensor({300, 16}, 61, false);
    Tensor t = rand_tensor({300, 16}, 62, false);
    CHECK(std::abs(two_way_identification(r, t) - 0.5) < 0.03);
}

TEST_CASE("electrode prefix to region mapping") {
    CHECK(region_from_electrode("Fp1") == "frontal");
    CHECK(region_from_electrode("AF3") == "frontal");
    CHECK(region_from_electrode("F7") == "frontal");
    CHECK(region_from_electrode("Fz") == "frontal");
    CHECK(region_from_electrode("FT9") == "temporal");
    CHECK(region_from_electrode("T7") == "temporal");
    CHECK(region_from_electrode("TP10") == "temporal");
    CHECK(region_from_electrode("FC5") == "central");
    CHECK(region_from_electrode("C3") == "central");
    CHECK(region_from_electrode("Cz") == "central");
    CHECK(region_from_electrode("CP6") == "central");
    CHECK(region_from_electrode("P4") == "parietal");
    CHECK(region_from_electrode("Pz") == "parietal");
    CHECK(region_from_electrode("PO8") == "occipital");
    CHECK(region_from_electrode("O1") == "occipital");
    CHECK(region_from_electrode("Oz") == "occipital");
    CHECK_THROWS_AS(region_from_electrode("X1"), metric_error);
}

TEST_CASE("region-scale similarity fixtures") {
    // region mean equal to every scale embedding: sims all 1, deltas (1,0,...)
    Tensor ch = Tensor::from({2, 3}, {1, 2, 3, 1, 2, 3});
    std::vector<Tensor> scales = {Tensor::from({3}, {1, 2, 3}), Tensor::from({3}, {2, 4, 6})};
    auto m = region_scale_similarity(ch, {"all", "all"}, scales);
    REQUIRE(m.regions == std::vector<std::string>{"all"});
    CHECK(m.sims[0][0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m.sims[0][1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m.deltas[0][0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m.deltas[0][1] == doctest::Approx(0.0).epsilon(1e-12));

    // hand-computed 2 regions x 2 scales
    Tensor ch2 = Tensor::from({3, 2}, {1, 0, 1, 0, 0, 1});
    std::vector<Tensor> sc2 = {Tensor::from({2}, {1, 0}), Tensor::from({2}, {0, 2})};
    auto hm = region_scale_similarity(ch2, {"front", "back", "back"}, sc2);
    REQUIRE(hm.regions == std::vector<std::string>{"back", "front"}); // sorted
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    CHECK(hm.sims[1][0] == doctest::Approx(1.0).epsilon(1e-12));          // front vs (1,0)
    CHECK(hm.sims[1][1] == doctest::Approx(0.0).epsilon(1e-12));          // front vs (0,2)
    CHECK(hm.sims[0][0] == doctest::Approx(inv_sqrt2).epsilon(1e-12));    // back mean (0.5,0.5)
    CHECK(hm.sims[0][1] == doctest::Approx(inv_sqrt2).epsilon(1e-12));
    CHECK(hm.deltas[0][1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("region-scale similarity telescoping and errors") {
    Tensor ch = rand_tensor({6, 8}, 71, false);
    std::vector<std::string> labels = {"a", "b", "a", "c", "b", "a"};
    std::vector<Tensor> scales;
    for (uint64_t k = 0; k < 4; ++k) scales.push_back(rand_tensor({8}, 80 + k, false));
    auto m = region_scale_similarity(ch, labels, scales);
    REQUIRE(m.regions.size() == 3);
    for (size_t r = 0; r < 3; ++r) {
        double sum = 0.0;
        for (double d : m.deltas[r]) sum += d;
        CHECK(std::abs(sum - m.sims[r][3]) < 1e-12);
    }

    CHECK_THROWS_AS(region_scale_similarity(ch, {"a", "b"}, scales), contract_error);
    std::vector<std::string> withempty = labels;
    withempty[2] = "";
    CHECK_THROWS_AS(region_scale_similarity(ch, withempty, scales), metric_error);
    std::vector<Tensor> baddim = {rand_tensor({5}, 90, false)};
    CHECK_THROWS_AS(region_scale_similarity(ch, labels, baddim), contract_error);
    Tensor zch = Tensor::from({1, 2}, {0.0, 0.0});
    CHECK_THROWS_WITH_AS(region_scale_similarity(zch, {"solo"}, {Tensor::from({2}, {1.0, 0.0})}),
                         doctest::Contains("solo"), metric_error);
}
