#include "support.hpp"

#include <fstream>

#include "tsrep/backbone.hpp"
#include "tsrep/errors.hpp"

using namespace tsrep;
using tsrep::test::random_vector;
using tsrep::test::TempDir;
using tsrep::test::tiny_backbone;

namespace {

using SeriesRows = std::vector<std::vector<float>>;

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_SUITE("backbone") {

TEST_CASE("flatten_channels splits channel-major") {
    auto rng = make_rng(1);
    auto x = Tensor::from_data({32, 3}, random_vector(96, rng));
    auto s = flatten_channels(x);
    REQUIRE(s.size() == 3);
    for (const auto& c : s) CHECK(c.size() == 32);
    CHECK(s[1][5] == x[5 * 3 + 1]);
    CHECK(s[2][31] == x[31 * 3 + 2]);

    auto ett = flatten_channels(Tensor::zeros({336, 7}));
    CHECK(ett.size() == 7);
    CHECK(ett[0].size() == 336);
    CHECK(flatten_channels(Tensor::zeros({16, 1})).size() == 1);
    CHECK_THROWS_AS(flatten_channels(Tensor::zeros({0, 3})), ContractError);
}

TEST_CASE("patchify counts and remainder") {
    std::vector<float> s(336);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = float(i);
    CHECK(patchify(std::span(s).first(32), 16).n_patches() == 2);
    CHECK(patchify(s, 16).n_patches() == 21);
    auto p = patchify(std::span(s).first(17), 16);
    CHECK(p.n_patches() == 1);
    CHECK(p.values.numel() == 16);
    CHECK(p.values[15] == 15.0f);
    CHECK_THROWS_AS(patchify(std::span(s).first(15), 16), ContractError);
    CHECK(p.patch_len() == 16);
    CHECK(p.pad_mask.size() == 1);
}

TEST_CASE("config validation") {
    auto c = tiny_backbone();
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = tiny_backbone();
    c.n_layers = 0;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = tiny_backbone();
    c.patch_len = 0;
    CHECK_THROWS_AS(c.validate(), ContractError);
    CHECK(BackboneConfig::default_heads(128) == 16);
    CHECK(BackboneConfig::default_heads(256) == 8);
}

TEST_CASE("instance normalization round trip") {
    auto rng = make_rng(2);
    auto s = random_vector(64, rng, 3.0f);
    for (auto& v : s) v += 5.0f;
    auto orig = s;
    auto st = instance_normalize(s);
    double m = 0.0, v2 = 0.0;
    for (float v : s) m += v;
    m /= 64.0;
    for (float v : s) v2 += (v - m) * (v - m);
    CHECK(std::abs(m) < 1e-5);
    CHECK(v2 / 64.0 == doctest::Approx(1.0).epsilon(1e-3));
    instance_denormalize(s, st);
    CHECK(tsrep::test::max_abs_diff(s, orig) < 1e-4);
}

TEST_CASE("encode is deterministic and shaped") {
    auto cfg = tiny_backbone();
    auto rng = make_rng(3);
    auto w = init_encoder(cfg, rng);
    auto data = random_vector(2 * 64, rng);
    SeriesRows rows = {std::vector<float>(data.begin(), data.begin() + 64), std::vector<float>(data.begin() + 64, data.end())};
    auto a = encode(patchify_batch(rows, cfg.patch_len), w, cfg);
    auto b = encode(patchify_batch(rows, cfg.patch_len), w, cfg);
    CHECK(a.shape() == Shape{2, 8, cfg.d_model});
    CHECK(values(a) == values(b));
}

TEST_CASE("causal encoding does not look ahead") {
    auto cfg = tiny_backbone();
    cfg.causal = true;
    auto rng = make_rng(4);
    auto w = init_encoder(cfg, rng);
    auto base = random_vector(64, rng);
    auto z0 = encode(patchify(base, cfg.patch_len), w, cfg);
    const std::size_t D = cfg.d_model;
    for (std::size_t j = 1; j < 8; ++j) {
        auto pert = base;
        for (std::size_t t = j * 8; t < (j + 1) * 8; ++t) pert[t] += 0.7f;
        auto z1 = encode(patchify(pert, cfg.patch_len), w, cfg);
        CAPTURE(j);
        CHECK(std::equal(z0.data().begin(), z0.data().begin() + j * D, z1.data().begin()));
        CHECK_FALSE(std::equal(z0.data().begin() + j * D, z0.data().begin() + (j + 1) * D, z1.data().begin() + j * D));
    }
}

TEST_CASE("causal leakage: gradient of latent j w.r.t. later patches is zero") {
    auto cfg = tiny_backbone();
    cfg.causal = true;
    auto rng = make_rng(5);
    auto w = init_encoder(cfg, rng);
    auto x = Tensor::from_data({1, 8, 8}, random_vector(64, rng));
    for (std::size_t j = 0; j < 8; ++j) {
        auto leaf = x.detach();
        leaf.set_requires_grad(true);
        PatchBatch pb{leaf, std::vector<std::uint8_t>(8, 0)};
        auto z = encode(pb, w, cfg);
        // A plain sum of a layer-normed row is constant; weight it.
        auto probe = Tensor::randn({1, 1, cfg.d_model}, rng);
        ops::sum(ops::slice(z, 1, j, j + 1) * probe).backward();
        auto g = leaf.grad();
        for (std::size_t k = j + 1; k < 8; ++k)
            for (std::size_t p = 0; p < 8; ++p) CHECK(g[k * 8 + p] == 0.0f);
        double own = 0.0;
        for (std::size_t p = 0; p < 8; ++p) own += std::abs(g[j * 8 + p]);
        CHECK(own > 0.0);
    }
}

TEST_CASE("non-causal encoding mixes all positions") {
    auto cfg = tiny_backbone();
    auto rng = make_rng(6);
    auto w = init_encoder(cfg, rng);
    auto base = random_vector(64, rng);
    auto pert = base;
    pert[63] += 1.0f;
    auto z0 = encode(patchify(base, 8), w, cfg);
    auto z1 = encode(patchify(pert, 8), w, cfg);
    CHECK_FALSE(std::equal(z0.data().begin(), z0.data().begin() + cfg.d_model, z1.data().begin()));
}

TEST_CASE("padded positions are neither attended nor attending") {
    auto mask = attention_mask(1, 1, 3, false, std::vector<std::uint8_t>{0, 0, 1});
    // [q, k]: column 2 blocked for every query.
    CHECK(mask[0 * 3 + 2] != 0);
    CHECK(mask[1 * 3 + 2] != 0);
    CHECK(mask[0 * 3 + 1] == 0);
    auto causal = attention_mask(1, 1, 3, true, {});
    CHECK(causal[0 * 3 + 1] != 0);
    CHECK(causal[2 * 3 + 0] == 0);

    auto cfg = tiny_backbone();
    auto rng = make_rng(7);
    auto w = init_encoder(cfg, rng);
    auto base = random_vector(64, rng);
    auto pb = patchify(base, 8);
    pb.pad_mask[7] = 1;
    auto z0 = encode(pb, w, cfg);
    auto pert = base;
    for (std::size_t t = 56; t < 64; ++t) pert[t] = 9.0f;
    auto pb1 = patchify(pert, 8);
    pb1.pad_mask[7] = 1;
    auto z1 = encode(pb1, w, cfg);
    CHECK(std::equal(z0.data().begin(), z0.data().begin() + 7 * cfg.d_model, z1.data().begin()));
}

TEST_CASE("batch permutation permutes outputs") {
    auto cfg = tiny_backbone();
    auto rng = make_rng(8);
    auto w = init_encoder(cfg, rng);
    SeriesRows rows;
    for (int i = 0; i < 4; ++i) rows.push_back(random_vector(64, rng));
    SeriesRows perm = {rows[2], rows[0], rows[3], rows[1]};
    const std::size_t order[4] = {2, 0, 3, 1};
    auto z = encode(patchify_batch(rows, 8), w, cfg);
    auto zp = encode(patchify_batch(perm, 8), w, cfg);
    const std::size_t block = 8 * cfg.d_model;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t e = 0; e < block; ++e)
            CHECK(zp.data()[i * block + e] == doctest::Approx(z.data()[order[i] * block + e]).epsilon(1e-6));
}

TEST_CASE("NaN activations raise with the layer") {
    auto cfg = tiny_backbone();
    auto rng = make_rng(9);
    auto w = init_encoder(cfg, rng);
    auto s = random_vector(64, rng);
    s[3] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(encode(patchify(s, 8), w, cfg), NumericError);
}

TEST_CASE("ema_update limits and contraction") {
    auto cfg = tiny_backbone(1);
    auto r1 = make_rng(10);
    auto r2 = make_rng(11);
    auto teacher = init_encoder(cfg, r1);
    auto student = init_encoder(cfg, r2);

    auto t_before = teacher.clone();
    ema_update(teacher, student, 1.0f);
    CHECK(weights_digest(teacher.named_parameters()) == weights_digest(t_before.named_parameters()));

    auto copy = teacher.clone();
    ema_update(copy, student, 0.0f);
    CHECK(weights_digest(copy.named_parameters()) == weights_digest(student.named_parameters()));

    // Distance to the student shrinks by exactly the momentum each step.
    auto dist = [&](const EncoderWeights& t) {
        double d = 0.0;
        auto tp = t.parameters();
        auto sp = student.parameters();
        for (std::size_t i = 0; i < tp.size(); ++i)
            for (std::size_t e = 0; e < tp[i].numel(); ++e) d = std::max(d, double(std::abs(tp[i][e] - sp[i][e])));
        return d;
    };
    auto t = teacher.clone();
    double prev = dist(t);
    for (int k = 0; k < 5; ++k) {
        ema_update(t, student, 0.996f);
        const double now = dist(t);
        CHECK(now == doctest::Approx(0.996 * prev).epsilon(1e-3));
        prev = now;
    }

    auto big = tiny_backbone(2);
    auto r3 = make_rng(12);
    auto other = init_encoder(big, r3);
    CHECK_THROWS_AS(ema_update(teacher, other, 0.5f), ContractError);
    CHECK_THROWS_AS(ema_update(teacher, student, 1.5f), ContractError);
}

TEST_CASE("default configuration round-trips through a checkpoint bit-identically") {
    BackboneConfig cfg;  // 8 layers, d_model 256, 8 heads
    CHECK(cfg.n_layers == 8);
    CHECK(cfg.d_model == 256);
    CHECK(cfg.n_heads == 8);
    CHECK(cfg.n_predictor_layers == 4);
    auto ckpt = random_checkpoint(cfg, 2003);
    ckpt.objective = "mae";
    ckpt.seed = 2003;
    ckpt.epoch = 7;
    TempDir dir("ckpt");
    save_checkpoint(dir / "a.ckpt", ckpt);
    auto back = load_checkpoint(dir / "a.ckpt");
    CHECK(back.config == cfg);
    CHECK(back.objective == "mae");
    CHECK(back.epoch == 7);
    CHECK(checkpoint_bytes(back) == checkpoint_bytes(ckpt));

    auto rng = make_rng(13);
    auto s = random_vector(336, rng);
    auto z0 = encode(patchify(s, 16), ckpt.weights, cfg);
    auto z1 = encode(patchify(s, 16), back.weights, back.config);
    CHECK(std::memcmp(z0.data().data(), z1.data().data(), z0.numel() * sizeof(float)) == 0);
}

TEST_CASE("checkpoint loader refuses other format versions") {
    auto ckpt = random_checkpoint(tiny_backbone(), 1);
    TempDir dir("ckptv");
    std::string bytes = checkpoint_bytes(ckpt);
    bytes[4] = static_cast<char>(kCheckpointFormatVersion + 1);
    {
        std::ofstream os(dir / "v.ckpt", std::ios::binary);
        os << bytes;
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "v.ckpt"), IoError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST_CASE("random checkpoints are seeded") {
    auto a = random_checkpoint(tiny_backbone(), 5);
    auto b = random_checkpoint(tiny_backbone(), 5);
    auto c = random_checkpoint(tiny_backbone(), 6);
    CHECK(checkpoint_bytes(a) == checkpoint_bytes(b));
    CHECK(weights_digest(a.weights.named_parameters()) != weights_digest(c.weights.named_parameters()));
}

}  // TEST_SUITE
