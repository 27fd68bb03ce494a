#include "support.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "tsrep/errors.hpp"
#include "tsrep/synthgen.hpp"

using namespace tsrep;
using tsrep::test::TempDir;

namespace {

KernelComposition single(KernelAtom atom) { return {{atom}, {}}; }

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

LcmConfig small_cfg() {
    LcmConfig c;
    c.n_series = 10;
    c.length = 64;
    c.n_channels = 3;
    c.shard_size = 4;
    return c;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = double(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_SUITE("synthgen") {

TEST_CASE("kernel bank") {
    const auto& bank = default_kernel_bank();
    CHECK(bank.size() == 33);
    std::map<KernelFamily, int> counts;
    for (const auto& a : bank) {
        CHECK_NOTHROW(a.validate());
        ++counts[a.family];
    }
    CHECK(counts.size() == 6);
    CHECK(counts[KernelFamily::exp_sine_squared] == 11);
}

TEST_CASE("composition sampling") {
    auto rng = make_rng(1);
    std::map<std::size_t, int> sizes;
    int adds = 0, ops = 0;
    for (int i = 0; i < 2000; ++i) {
        auto c = sample_kernel_composition(rng);
        CHECK_NOTHROW(c.validate());
        REQUIRE(c.ops.size() + 1 == c.atoms.size());
        ++sizes[c.atoms.size()];
        for (auto op : c.ops) {
            ++ops;
            adds += op == KernelOp::add;
        }
    }
    CHECK(sizes.size() == 5);
    CHECK(sizes.begin()->first == 1);
    CHECK(sizes.rbegin()->first == 5);
    for (auto [k, n] : sizes) CHECK(n == doctest::Approx(400).epsilon(0.2));
    CHECK(double(adds) / ops == doctest::Approx(0.5).epsilon(0.1));
    CHECK(sample_kernel_composition(rng, default_kernel_bank(), 1).ops.empty());
    KernelComposition bad{{KernelAtom{}, KernelAtom{}}, {}};
    CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("gram matrices of simple kernels") {
    KernelAtom c;
    c.family = KernelFamily::constant;
    c.value = 2.5;
    auto g = gram_matrix(single(c), 8);
    CHECK((g.array() == 2.5).all());

    KernelAtom r;
    r.family = KernelFamily::rbf;
    r.length_scale = 0.3;
    auto gr = gram_matrix(single(r), 16);
    for (int i = 0; i < 16; ++i) CHECK(gr(i, i) == 1.0);
    CHECK(gr(0, 15) == doctest::Approx(std::exp(-0.5 / 0.09)));
    CHECK((gr - gr.transpose()).cwiseAbs().maxCoeff() == 0.0);

    KernelAtom w;
    w.family = KernelFamily::white_noise;
    w.noise_level = 0.1;
    auto gw = gram_matrix(single(w), 5);
    CHECK(gw.isApprox(0.1 * Eigen::MatrixXd::Identity(5, 5)));

    // Periodicity in samples: a period of T - 1 samples wraps end to start.
    KernelAtom p;
    p.family = KernelFamily::exp_sine_squared;
    p.periodicity = 7.0;
    auto gp = gram_matrix(single(p), 8);
    CHECK(gp(0, 7) == doctest::Approx(1.0));
    CHECK_THROWS_AS(gram_matrix(single(c), 1), ContractError);
}

TEST_CASE("random compositions are positive semi-definite") {
    auto rng = make_rng(2);
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
        auto comp = sample_kernel_composition(rng);
        auto g = gram_matrix(comp, 64);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g, Eigen::EigenvaluesOnly);
        const double rel = es.eigenvalues().minCoeff() / std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
        worst = std::min(worst, rel);
    }
    CHECK(worst >= -1e-8);
}

TEST_CASE("GP sampling") {
    auto rng = make_rng(3);
    auto tiny = sample_gp(Eigen::MatrixXd::Zero(200, 200), rng);
    double ss = 0.0;
    for (double v : tiny) ss += v * v;
    CHECK(std::sqrt(ss / 200.0) <= 2e-3);

    std::vector<double> pooled;
    for (int d = 0; d < 40; ++d) {
        auto x = sample_gp(Eigen::MatrixXd::Identity(500, 500), rng);
        pooled.insert(pooled.end(), x.begin(), x.end());
    }
    double m = 0.0, v = 0.0;
    for (double x : pooled) m += x;
    m /= pooled.size();
    for (double x : pooled) v += (x - m) * (x - m);
    const double sd = std::sqrt(v / pooled.size());
    CHECK(sd >= 0.98);
    CHECK(sd <= 1.02);

    KernelAtom r;
    r.family = KernelFamily::rbf;
    r.length_scale = 0.2;
    auto g = gram_matrix(single(r), 12);
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(12, 12);
    const int draws = 4000;
    for (int d = 0; d < draws; ++d) {
        auto x = sample_gp(g, rng);
        Eigen::Map<Eigen::VectorXd> xv(x.data(), 12);
        acc += xv * xv.transpose();
    }
    CHECK((acc / draws - g).cwiseAbs().maxCoeff() < 0.1);

    Eigen::MatrixXd indefinite = -Eigen::MatrixXd::Identity(4, 4);
    CHECK_THROWS_AS(sample_gp(indefinite, rng), NumericError);
}

TEST_CASE("pooled GP mean is zero within sampling error") {
    auto rng = make_rng(4);
    std::vector<double> means;
    for (int i = 0; i < 300; ++i) {
        auto x = sample_gp(gram_matrix(sample_kernel_composition(rng), 64), rng);
        double m = 0.0;
        for (double v : x) m += v;
        means.push_back(m / x.size());
    }
    double mu = 0.0, var = 0.0;
    for (double m : means) mu += m;
    mu /= means.size();
    for (double m : means) var += (m - mu) * (m - mu);
    const double se = std::sqrt(var / (means.size() - 1) / means.size());
    CHECK(std::abs(mu) < 3.0 * se);
}

TEST_CASE("Dirichlet and latent counts") {
    auto rng = make_rng(5);
    for (double alpha : {0.1, 0.5, 1.0}) {
        for (int i = 0; i < 200; ++i) {
            auto w = sample_dirichlet(alpha, 7, rng);
            double s = 0.0;
            for (double v : w) {
                CHECK(v >= 0.0);
                s += v;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    CHECK(sample_dirichlet(0.3, 1, rng) == std::vector<double>{1.0});
    LcmConfig cfg;
    for (int i = 0; i < 500; ++i) {
        const auto j = sample_latent_count(cfg, rng);
        CHECK(j >= cfg.latent_min);
        CHECK(j <= cfg.latent_max);
    }
}

TEST_CASE("single latent makes every channel equal the latent") {
    auto cfg = small_cfg();
    cfg.latent_min = cfg.latent_max = 1;
    auto rng = make_rng(6);
    auto s = sample_multivariate_lcm(cfg, rng);
    REQUIRE(s.latent_count == 1);
    REQUIRE(s.channels.size() == 3);
    for (std::size_t c = 1; c < 3; ++c) CHECK(s.channels[c] == s.channels[0]);
    for (const auto& w : s.weights) CHECK(w == std::vector<double>{1.0});
}

TEST_CASE("shared latents give non-negative channel correlation on average") {
    auto cfg = small_cfg();
    cfg.n_channels = 4;
    auto rng = make_rng(7);
    double total = 0.0;
    std::size_t pairs = 0;
    for (int i = 0; i < 100; ++i) {
        auto s = sample_multivariate_lcm(cfg, rng);
        for (std::size_t a = 0; a < 4; ++a)
            for (std::size_t b = a + 1; b < 4; ++b) {
                const double r = pearson(s.channels[a], s.channels[b]);
                if (std::isfinite(r)) {
                    total += r;
                    ++pairs;
                }
            }
    }
    CHECK(total / pairs >= 0.0);
}

TEST_CASE("univariate series are standardized") {
    auto cfg = small_cfg();
    auto rng = make_rng(8);
    for (int i = 0; i < 20; ++i) {
        auto x = sample_univariate(cfg, rng);
        REQUIRE(x.size() == 64);
        double m = 0.0, v = 0.0;
        for (double e : x) m += e;
        m /= 64;
        for (double e : x) v += (e - m) * (e - m);
        CHECK(std::abs(m) < 1e-9);
        CHECK(std::sqrt(v / 64) == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("config validation") {
    auto cfg = small_cfg();
    cfg.latent_min = 0;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = small_cfg();
    cfg.alpha_lo = 2.0;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    CHECK(small_cfg().serialize() == small_cfg().serialize());
    CHECK(small_cfg().serialize() != LcmConfig{}.serialize());
}

TEST_CASE("corpus round trip and worker independence") {
    auto cfg = small_cfg();
    TempDir a("corpus-a"), b("corpus-b");
    auto ma = generate_corpus(cfg, true, a.path(), 1, 21);
    auto mb = generate_corpus(cfg, true, b.path(), 4, 21);
    CHECK(ma.shards.size() == 3);
    CHECK(ma.shards.back().count == 2);
    CHECK(ma.serialize() == mb.serialize());
    for (const auto& s : ma.shards) CHECK(file_bytes(a / s.path) == file_bytes(b / s.path));
    CHECK(file_bytes(a / kManifestName) == file_bytes(b / kManifestName));

    auto parsed = read_manifest(a / kManifestName);
    CHECK(parsed.serialize() == ma.serialize());
    CHECK(parsed.seed == 21);
    CHECK(parsed.univariate);

    auto series = load_corpus_series(a / kManifestName);
    REQUIRE(series.size() == 10);
    // Series i depends only on its own stream.
    for (std::size_t i = 0; i < 10; ++i) {
        auto rng = make_rng(derive_seed(21, i));
        auto ref = sample_univariate(cfg, rng);
        for (std::size_t t = 0; t < 64; ++t) CHECK(series[i][t] == float(ref[t]));
    }

    TempDir c("corpus-c");
    auto mc = generate_corpus(cfg, false, c.path(), 2, 21);
    CHECK(mc.channels == 3);
    CHECK(load_corpus_series(c / kManifestName).size() == 30);
    CHECK(mc.config_digest != ma.config_digest);
}

TEST_CASE("manifest parsing and IO errors") {
    CHECK_THROWS_AS(CorpusManifest::parse("n_series=3\n"), ParseError);
    CorpusManifest m;
    m.n_series = 5;
    m.shards = {{"x.tsb", 4}};
    CHECK_THROWS_AS(CorpusManifest::parse(m.serialize()), ParseError);
    m.shards[0].count = 5;
    CHECK(CorpusManifest::parse(m.serialize()).shards[0].path == "x.tsb");

    TempDir d("corpus-bad");
    {
        std::ofstream os(d / "file");
        os << "x";
    }
    CHECK_THROWS_AS(generate_corpus(small_cfg(), true, d / "file" / "sub", 1, 0), IoError);
    CHECK_THROWS_AS(read_manifest(d / "missing.txt"), IoError);
    CHECK_THROWS_AS(generate_corpus(small_cfg(), true, d / "ok", 0, 0), ContractError);
}

}  // TEST_SUITE
