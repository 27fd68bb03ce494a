#include "support.hpp"

#include <fstream>
#include <sstream>

#include "tsrep/errors.hpp"
#include "tsrep/eval.hpp"
#include "tsrep/tensor_io.hpp"

using namespace tsrep;
using tsrep::test::random_vector;
using tsrep::test::TempDir;
using tsrep::test::tiny_backbone;

namespace {

using Bits = std::vector<std::uint8_t>;

// Segment scan written independently of the library: every labeled point
// looks left and right through its own run for any detection.
Bits point_adjust_oracle(const Bits& preds, const Bits& labels) {
    Bits out = preds;
    const long n = long(labels.size());
    for (long i = 0; i < n; ++i) {
        if (!labels[i]) continue;
        bool hit = false;
        for (long j = i; j >= 0 && labels[j]; --j) hit |= preds[j] != 0;
        for (long j = i; j < n && labels[j]; ++j) hit |= preds[j] != 0;
        if (hit) out[i] = 1;
    }
    return out;
}

Bits random_bits(std::size_t n, double p, std::mt19937_64& rng) {
    std::bernoulli_distribution b(p);
    Bits out(n);
    for (auto& v : out) v = b(rng);
    return out;
}

// Labels arrive in runs so point adjustment has segments to work on.
Bits random_segments(std::size_t n, std::mt19937_64& rng) {
    Bits out(n, 0);
    std::uniform_int_distribution<std::size_t> start(0, n - 1), len(1, 8);
    std::uniform_int_distribution<int> count(0, 4);
    for (int k = count(rng); k > 0; --k) {
        const std::size_t s = start(rng), l = len(rng);
        for (std::size_t i = s; i < std::min(n, s + l); ++i) out[i] = 1;
    }
    return out;
}

ProbeHead zero_anomaly_head(const BackboneConfig& cfg) {
    ProbeHead h;
    h.mode = ProbeMode::linear;
    h.linear = {Tensor::zeros({cfg.d_model, cfg.patch_len}), Tensor::zeros({cfg.patch_len})};
    return h;
}

TaskData two_class_data(std::size_t per_class, std::uint64_t seed) {
    auto rng = make_rng(seed);
    std::uniform_real_distribution<double> ph(0.0, 6.28);
    TaskData d;
    d.task = TaskKind::classify;
    d.n_classes = 2;
    for (std::size_t split = 0; split < 2; ++split)
        for (std::size_t i = 0; i < per_class; ++i)
            for (std::size_t c = 0; c < 2; ++c) {
                auto s = tsrep::test::sine(64, c == 0 ? 1.0 : 16.0, ph(rng));
                (split == 0 ? d.train_inputs : d.val_inputs).push_back(s);
                (split == 0 ? d.train_labels : d.val_labels).push_back(c);
            }
    return d;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("probe defaults") {
    ProbeSpec s;
    CHECK(s.epochs == 20);
    CHECK(s.freeze_backbone());
    auto a = ProbeSpec::for_task(TaskKind::anomaly);
    CHECK(a.epochs == 10);
    CHECK(a.patience == 3);
    CHECK_FALSE(ProbeSpec::for_task(TaskKind::classify, ProbeMode::finetune).freeze_backbone());
    for (auto m : {ProbeMode::linear, ProbeMode::mlp, ProbeMode::finetune}) CHECK(parse_probe_mode(to_string(m)) == m);
    for (auto t : {TaskKind::forecast, TaskKind::classify, TaskKind::anomaly}) CHECK(parse_task(to_string(t)) == t);
    CHECK_THROWS_AS(parse_task("impute"), ConfigError);
}

TEST_CASE("forecast metrics") {
    std::vector<float> t = {1, -2, 3, 0.5f};
    auto z = forecast_metrics(t, t);
    CHECK(z.mse == 0.0);
    CHECK(z.mae == 0.0);
    std::vector<float> p = {2, -1, 4, 1.5f};
    auto o = forecast_metrics(p, t);
    CHECK(o.mse == doctest::Approx(1.0));
    CHECK(o.mae == doctest::Approx(1.0));

    auto rng = make_rng(1);
    auto a = random_vector(1000, rng), b = random_vector(1000, rng);
    std::vector<double> diff(1000);
    for (std::size_t i = 0; i < 1000; ++i) diff[i] = double(a[i]) - b[i];
    double mse = 0.0, mae = 0.0;
    for (double d : diff) mse += d * d;
    for (double d : diff) mae += std::abs(d);
    auto m = forecast_metrics(a, b);
    CHECK(std::abs(m.mse - mse / 1000) < 1e-7);
    CHECK(std::abs(m.mae - mae / 1000) < 1e-7);
    CHECK_THROWS_AS(forecast_metrics(std::vector<float>{}, std::vector<float>{}), ContractError);
    CHECK_THROWS_AS(forecast_metrics(p, std::vector<float>{1}), ContractError);
}

TEST_CASE("anomaly scores") {
    auto cfg = tiny_backbone();
    auto w = random_checkpoint(cfg, 1).weights;
    auto head = zero_anomaly_head(cfg);
    // A constant series is reconstructed exactly by the window mean.
    std::vector<float> flat(100, 0.25f);
    for (double s : anomaly_scores(w, cfg, head, flat, 32)) CHECK(s == 0.0);

    auto spiked = flat;
    spiked[77] = 5.0f;
    auto scores = anomaly_scores(w, cfg, head, spiked, 32);
    REQUIRE(scores.size() == 100);
    CHECK(std::max_element(scores.begin(), scores.end()) - scores.begin() == 77);

    auto rng = make_rng(2);
    auto noisy = random_vector(200, rng);
    for (double s : anomaly_scores(w, cfg, head, noisy, 64)) CHECK(s >= 0.0);
    CHECK_THROWS_AS(anomaly_scores(w, cfg, head, noisy, 30), ShapeError);
    CHECK_THROWS_AS(anomaly_scores(w, cfg, head, std::vector<float>(16, 0.0f), 32), ShapeError);
}

TEST_CASE("percentile thresholds") {
    std::vector<double> none, hundred(100);
    for (int i = 0; i < 100; ++i) hundred[i] = i + 1;
    auto f = threshold_by_percentile(none, hundred, 1.0);
    CHECK(std::count(f.begin(), f.end(), 1) == 1);
    CHECK(f[99] == 1);
    CHECK(percentile_threshold(none, hundred, 1.0) == doctest::Approx(99.01));

    std::vector<double> same(50, 3.0);
    auto all = threshold_by_percentile(same, same, 1.0);
    CHECK(std::all_of(all.begin(), all.end(), [](auto v) { return v == 1; }));

    std::vector<double> train = {0.5, 2.0, 3.5}, test = {1.0, 4.0, 2.5, 6.0};
    CHECK(percentile_threshold(train, test, 10.0) == doctest::Approx(4.8));
    CHECK(percentile_threshold(train, test, 25.0) == doctest::Approx(3.75));
    CHECK(threshold_by_percentile(train, test, 25.0) == Bits{0, 1, 0, 1});

    CHECK_THROWS_AS(threshold_by_percentile(train, none, 1.0), ContractError);
    CHECK_THROWS_AS(percentile_threshold(none, none, 1.0), ContractError);
    CHECK_THROWS_AS(percentile_threshold(train, test, 0.0), ContractError);
}

TEST_CASE("flagged fraction tracks the percentile") {
    auto rng = make_rng(3);
    std::normal_distribution<double> nd;
    for (double pct : {0.5, 1.0, 5.0, 20.0}) {
        std::vector<double> train(3000), test(1000);
        for (auto& v : train) v = nd(rng);
        for (auto& v : test) v = nd(rng);
        const double thr = percentile_threshold(train, test, pct);
        std::size_t flagged = 0;
        for (double v : train) flagged += v >= thr;
        for (double v : test) flagged += v >= thr;
        CAPTURE(pct);
        CHECK(std::abs(double(flagged) - pct / 100.0 * 4000.0) <= 1.0 + 1e-9);
    }
}

TEST_CASE("point adjustment") {
    CHECK(point_adjust(Bits{0, 1, 0}, Bits{1, 1, 1}) == Bits{1, 1, 1});
    CHECK(point_adjust(Bits{1, 0, 1, 0}, Bits{0, 0, 0, 0}) == Bits{1, 0, 1, 0});
    CHECK(point_adjust(Bits{0, 0, 1, 0, 0}, Bits{1, 0, 1, 1, 0}) == Bits{0, 0, 1, 1, 0});
    CHECK_THROWS_AS(point_adjust(Bits{0}, Bits{0, 1}), ContractError);
    auto rng = make_rng(4);
    for (int i = 0; i < 200; ++i) {
        auto labels = random_segments(40, rng);
        auto preds = random_bits(40, 0.1, rng);
        CHECK(point_adjust(preds, labels) == point_adjust_oracle(preds, labels));
    }
}

TEST_CASE("point adjustment never lowers F1") {
    auto rng = make_rng(5);
    for (int i = 0; i < 500; ++i) {
        auto labels = random_segments(60, rng);
        auto preds = random_bits(60, 0.15, rng);
        CHECK(f1_score(point_adjust(preds, labels), labels).f1 >= f1_score(preds, labels).f1);
    }
}

TEST_CASE("F1 scores") {
    auto same = f1_score(Bits{0, 1, 1}, Bits{0, 1, 1});
    CHECK(same.precision == 1.0);
    CHECK(same.recall == 1.0);
    CHECK(same.f1 == 1.0);
    auto none = f1_score(Bits{0, 0, 0}, Bits{0, 1, 0});
    CHECK(none.precision == 0.0);
    CHECK(none.recall == 0.0);
    CHECK(none.f1 == 0.0);
    // tp = 2, fp = 1, fn = 1
    auto s = f1_score(Bits{1, 1, 1, 0, 0}, Bits{1, 1, 0, 1, 0});
    CHECK(s.precision == doctest::Approx(2.0 / 3.0));
    CHECK(s.recall == doctest::Approx(2.0 / 3.0));
    CHECK(s.f1 == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("accuracy") {
    auto logits = Tensor::from_data({3, 3}, {5, 0, 0, 0, 0, 1, 0, 2, 1});
    std::vector<std::size_t> labels = {0, 2, 1};
    CHECK(accuracy(logits, labels) == 1.0);
    CHECK(accuracy(logits * 7.0f, labels) == 1.0);
    CHECK(accuracy(Tensor::from_data({1, 2}, {0, 1}), std::vector<std::size_t>{0}) == 0.0);
    CHECK_THROWS_AS(accuracy(logits, std::vector<std::size_t>{0, 1}), ContractError);
    CHECK_THROWS_AS(accuracy(logits, std::vector<std::size_t>{0, 1, 3}), ContractError);

    auto rng = make_rng(6);
    const std::size_t n = 10000;
    auto random_logits = Tensor::from_data({n, 4}, random_vector(n * 4, rng));
    std::uniform_int_distribution<std::size_t> cls(0, 3);
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = cls(rng);
    CHECK(accuracy(random_logits, y) == doctest::Approx(0.25).epsilon(0.08));
}

TEST_CASE("frozen probe on a separable set") {
    auto cfg = tiny_backbone();
    auto ckpt = random_checkpoint(cfg, 3);
    auto data = two_class_data(32, 7);
    auto spec = ProbeSpec::for_task(TaskKind::classify);
    spec.lr = 1e-2;
    const auto before = checkpoint_bytes(ckpt);
    auto res = probe_train(ckpt, spec, data);
    CHECK(res.digest_before == res.digest_after);
    CHECK(checkpoint_bytes(ckpt) == before);
    CHECK(res.epochs_run == 20);
    CHECK_FALSE(res.tuned.has_value());
    CHECK(&probe_encoder(ckpt, res) == &ckpt.weights);
    auto test = two_class_data(50, 8);
    CHECK(classify_head_eval(ckpt.weights, cfg, res.head, test.val_inputs, test.val_labels, 2) > 0.95);

    auto bad = data;
    bad.train_labels[0] = 5;
    CHECK_THROWS_AS(probe_train(ckpt, spec, bad), ContractError);
    CHECK_THROWS_AS(classify_head_eval(ckpt.weights, cfg, res.head, bad.train_inputs, bad.train_labels, 2),
                    ContractError);
}

TEST_CASE("fine-tuning updates a copy only") {
    auto cfg = tiny_backbone(1);
    auto ckpt = random_checkpoint(cfg, 4);
    auto data = two_class_data(8, 9);
    auto spec = ProbeSpec::for_task(TaskKind::classify, ProbeMode::finetune);
    spec.epochs = 2;
    const auto before = checkpoint_bytes(ckpt);
    auto res = probe_train(ckpt, spec, data);
    REQUIRE(res.tuned.has_value());
    CHECK(checkpoint_bytes(ckpt) == before);
    CHECK(weights_digest(res.tuned->named_parameters()) != weights_digest(ckpt.weights.named_parameters()));
}

TEST_CASE("embedding export") {
    auto cfg = tiny_backbone();
    auto ckpt = random_checkpoint(cfg, 5);
    auto rng = make_rng(10);
    SeriesBatch series;
    for (int i = 0; i < 6; ++i) series.push_back(random_vector(64, rng));
    std::vector<std::size_t> labels = {0, 1, 0, 1, 2, 2};
    TempDir d("embed");
    export_embeddings(ckpt, series, labels, d / "a");
    export_embeddings(ckpt, series, labels, d / "b");
    auto z = load_tsb(d / "a.tsb");
    REQUIRE(z.shape() == Shape{6, 16});
    auto mem = pooled_latents(ckpt.weights, cfg, series);
    CHECK(std::equal(mem.data().begin(), mem.data().end(), z.data().begin()));
    CHECK(tsb_bytes(z) == tsb_bytes(load_tsb(d / "b.tsb")));
    std::ifstream a(d / "a.csv"), b(d / "b.csv");
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    const std::string csv = sa.str();
    CHECK(csv == sb.str());
    CHECK(csv.rfind("index,label,e0,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
    CHECK_THROWS_AS(export_embeddings(ckpt, series, std::vector<std::size_t>{1}, d / "c"), ContractError);
}

TEST_CASE("metric records round-trip through CSV") {
    MetricRecord r{"run-1", "mae", "synthetic", 2, "classify", "toy", "linear", "accuracy", 0.123456789012345,
                   "7"};
    auto back = parse_csv_row(to_csv_row(r));
    CHECK(back == r);
    CHECK(r.key() == "run-1|classify|toy|linear|accuracy|7");
    CHECK(metric_csv_header().find("value") != std::string::npos);
    CHECK_THROWS_AS(parse_csv_row("a,b,c"), ParseError);
    r.dataset = "a,b";
    CHECK_THROWS(to_csv_row(r));
}

TEST_CASE("forecast windows and sets") {
    std::vector<float> s(100);
    for (int i = 0; i < 100; ++i) s[i] = float(i);
    auto [ctx, tgt] = forecast_windows(s, 32, 8, 10);
    REQUIRE(ctx.size() == 7);
    CHECK(ctx[1][0] == 10.0f);
    CHECK(tgt[1][0] == 42.0f);
    CHECK(tgt.back().back() == 99.0f);
    auto set = make_forecast_set("ramp", std::vector<float>(1000, 1.0f), 64, 16, 8);
    CHECK(set.horizon == 16);
    CHECK_FALSE(set.data.train_inputs.empty());
    CHECK_FALSE(set.test_contexts.empty());
}

TEST_CASE("the evaluation trace does not depend on the checkpoint") {
    auto cfg = tiny_backbone(1);
    ToySuiteConfig toy;
    toy.per_class_train = 8;
    toy.per_class_val = 4;
    toy.per_class_test = 8;
    toy.anomaly_train_len = 512;
    toy.anomaly_test_len = 512;
    toy.n_anomalies = 3;
    toy.forecast_len = 600;
    toy.window = 64;
    toy.forecast_horizon = 16;
    auto suite = toy_suite(toy, 1);
    auto a = evaluate_checkpoint(random_checkpoint(cfg, 1), suite, ProbeMode::linear, {"a"}, 1);
    auto b = evaluate_checkpoint(random_checkpoint(cfg, 2), suite, ProbeMode::linear, {"b"}, 1);
    CHECK(a.trace == b.trace);
    CHECK_FALSE(a.trace.empty());
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].metric == b.rows[i].metric);
        CHECK(a.rows[i].dataset == b.rows[i].dataset);
        CHECK(std::isfinite(a.rows[i].value));
    }
    auto again = evaluate_checkpoint(random_checkpoint(cfg, 1), suite, ProbeMode::linear, {"a"}, 1);
    CHECK(again.rows == a.rows);
}

}  // TEST_SUITE
