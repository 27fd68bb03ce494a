#include "support.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tsrep/errors.hpp"
#include "tsrep/harness.hpp"
#include "tsrep/synthgen.hpp"

using namespace tsrep;
using tsrep::test::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    os << text;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// 100 rows of three channels with distinct levels and a time column.
std::string three_channel_csv(std::vector<std::vector<double>>* values = nullptr) {
    std::ostringstream os;
    os.precision(9);
    os << "time,a,b,c\n";
    auto rng = make_rng(1);
    std::normal_distribution<double> nd;
    for (int i = 0; i < 100; ++i) {
        const double a = 10.0 + nd(rng), b = -3.0 + 0.01 * i, c = std::sin(0.3 * i) * 4.0;
        os << "2024-01-01T" << i << ',' << a << ',' << b << ',' << c << '\n';
        if (values) values->push_back({a, b, c});
    }
    return os.str();
}

// Tiny everything so a full pre-train and evaluate cycle takes milliseconds.
RunConfig tiny_run(const std::filesystem::path& root, const std::string& id, const std::string& objective) {
    std::ostringstream os;
    os << "[run]\nrun_id=" << id << "\nobjective=" << objective << "\nseeds=11,12,13,14,15\noutput_root=" << root.string()
       << "\n[backbone]\npatch_len=8\nd_model=16\nn_heads=2\nn_layers=1\nn_predictor_layers=1\nmax_patches=8\n"
       << "[pretrain]\nepochs=1\nbatch_size=16\nmax_steps=2\n"
       << "[sigreg]\nn_projections=16\n[objective]\ndino_prototypes=16\n"
       << "[data]\nwindow=64\nstride=32\ntoy_series=24\ntoy_length=128\n"
       << "[eval]\ntasks=classify\nprobe_epochs=1\nanomaly_window=64\n";
    return RunConfig::parse(os.str());
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("config round trip") {
    RunConfig def;
    CHECK(RunConfig::parse(def.serialize()).serialize() == def.serialize());
    TempDir d("cfg");
    auto t = tiny_run(d.path(), "rt", "lejepa");
    t.objective_cfg.global_suite = {{TransformFamily::jitter, 0.1f}};
    t.eval.horizons = {24, 48};
    const auto text = t.serialize();
    auto back = RunConfig::parse(text);
    CHECK(back.serialize() == text);
    CHECK(back.objective == Objective::lejepa);
    CHECK(back.seeds == std::vector<std::uint64_t>{11, 12, 13, 14, 15});
    CHECK(back.backbone.d_model == 16);
    CHECK(back.objective_cfg.global_suite.size() == 1);
    CHECK(back.eval.horizons == std::vector<std::size_t>{24, 48});
    write_file(d / "c.ini", text);
    CHECK(RunConfig::load(d / "c.ini").serialize() == text);
    CHECK(config_schema().front().first == "run");
}

TEST_CASE("config errors") {
    CHECK_THROWS_AS(RunConfig::parse("[run]\nbogus=1\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[nowhere]\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[run]\nrun_id=a\nrun_id=b\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[run]\nobjective=simclr\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[backbone]\nd_model=lots\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("run_id=x\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::load("/nonexistent/tsrep.ini"), IoError);
    try {
        RunConfig::parse("[run]\n\nworkers=x\n");
        FAIL("expected a ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
}

TEST_CASE("assignments override single keys") {
    RunConfig c;
    c.set("backbone.n_layers=3");
    c.set("run.objective = jepa");
    c.set("eval.tasks=forecast,anomaly");
    CHECK(c.backbone.n_layers == 3);
    CHECK(c.objective == Objective::jepa);
    CHECK(c.eval.tasks == std::vector<TaskKind>{TaskKind::forecast, TaskKind::anomaly});
    CHECK_THROWS_AS(c.set("backbone.n_layers"), ConfigError);
    CHECK_THROWS_AS(c.set("n_layers=3"), ConfigError);
    CHECK_THROWS_AS(c.set("backbone.width=3"), ConfigError);
}

TEST_CASE("data root honours the environment") {
    RunConfig c;
    c.data.root = "local";
    ::unsetenv("TSB_DATA_ROOT");
    CHECK(c.data_root() == std::filesystem::path("local"));
    ::setenv("TSB_DATA_ROOT", "/srv/tsb", 1);
    CHECK(c.data_root() == std::filesystem::path("/srv/tsb"));
    ::unsetenv("TSB_DATA_ROOT");
}

TEST_CASE("synthetic corpus referenced by directory or manifest") {
    TempDir d;
    LcmConfig g;
    g.n_series = 5;
    g.length = 128;
    g.n_channels = 1;
    generate_corpus(g, true, d.path() / "corpus", 1, 3);
    RunConfig c = tiny_run(d.path(), "syn", "mae");
    c.data.root = d.path();
    c.set("run.data_source=synthetic");
    c.data.synthetic = "corpus";
    const SeriesBatch by_dir = load_pretrain_corpus(c);
    c.data.synthetic = "corpus/manifest.txt";
    const SeriesBatch by_file = load_pretrain_corpus(c);
    CHECK(by_dir.size() == 5 * 3);  // windows of 64 at stride 32 over 128 samples
    CHECK(by_dir == by_file);
}

TEST_CASE("CSV ingest") {
    TempDir d("ingest");
    std::vector<std::vector<double>> src;
    write_file(d / "x.csv", three_channel_csv(&src));
    CsvSchema schema;
    schema.timestamp_column = "time";
    auto m = ingest_csv(d / "x.csv", schema, d / "out");
    CHECK(m.rows == 100);
    CHECK(m.channels == 3);
    CHECK(m.shards.size() == 1);
    CHECK(m.columns == std::vector<std::string>{"a", "b", "c"});
    CHECK(m.train_end == 70);
    CHECK(m.val_end == 80);

    auto ds = load_dataset(d / "out" / kDatasetManifestName);
    REQUIRE(ds.channels.size() == 3);
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 70; ++i) mean += ds.channels[c][i];
        CHECK(std::abs(mean / 70.0) < 1e-6);
        // Un-standardizing recovers the source within float32 rounding.
        for (std::size_t i = 0; i < 100; ++i) {
            const double back = ds.channels[c][i] * m.stddev[c] + m.mean[c];
            CHECK(back == doctest::Approx(src[i][c]).epsilon(1e-6).scale(1.0));
        }
    }
    // The ramp channel drifts upward past the training split.
    double test_mean = 0.0;
    for (std::size_t i = 80; i < 100; ++i) test_mean += ds.channels[1][i];
    CHECK(test_mean / 20.0 > 1.0);
    CHECK(DatasetManifest::parse(m.serialize()).serialize() == m.serialize());
}

TEST_CASE("CSV ingest with labels and errors") {
    TempDir d("ingest-bad");
    write_file(d / "l.csv", "v,label\n1,0\n2,0\n3,1\n4,0\n5,0\n6,0\n7,1\n8,0\n9,0\n10,0\n");
    CsvSchema schema;
    schema.label_column = "label";
    auto m = ingest_csv(d / "l.csv", schema, d / "l");
    auto ds = load_dataset(d / "l" / kDatasetManifestName);
    CHECK(ds.labels == std::vector<std::uint8_t>{0, 0, 1, 0, 0, 0, 1, 0, 0, 0});
    CHECK(m.channels == 1);

    auto expect_line = [&](const std::string& text, const std::string& needle) {
        write_file(d / "bad.csv", text);
        try {
            ingest_csv(d / "bad.csv", CsvSchema{}, d / "bad");
            FAIL("expected a ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
        }
    };
    expect_line("a,b\n1,2\n3\n", "line 3");
    expect_line("a,b\n1,2\n3,4\n5,x\n", "line 4");
    CHECK_THROWS_AS(ingest_csv(d / "missing.csv", CsvSchema{}, d / "m"), IoError);

    // Tampered shards fail the checksum.
    write_file(d / "x.csv", three_channel_csv());
    schema = {};
    schema.timestamp_column = "time";
    auto good = ingest_csv(d / "x.csv", schema, d / "x");
    const auto shard = d / "x" / good.shards[0].path;
    auto bytes = read_file(shard);
    bytes[bytes.size() - 1] ^= 0x01;
    write_file(shard, bytes);
    CHECK_THROWS_AS(load_dataset(d / "x" / kDatasetManifestName), ParseError);
}

TEST_CASE("aggregates are recomputable from the per-seed rows") {
    TempDir d("agg");
    auto cfg = tiny_run(d.path(), "agg", "mae");
    auto res = run_experiment(cfg);
    CHECK(res.evaluated == 5);
    std::map<std::string, std::vector<double>> per_metric;
    std::map<std::string, double> mean, sd;
    for (const auto& r : res.rows) {
        const std::string g = r.task + '|' + r.dataset + '|' + r.metric;
        if (r.seed == "mean") mean[g] = r.value;
        else if (r.seed == "std") sd[g] = r.value;
        else per_metric[g].push_back(r.value);
    }
    REQUIRE_FALSE(per_metric.empty());
    for (const auto& [g, v] : per_metric) {
        CAPTURE(g);
        REQUIRE(v.size() == 5);
        double m = 0.0;
        for (double x : v) m += x;
        m /= 5.0;
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        CHECK(mean.at(g) == doctest::Approx(m).epsilon(1e-12));
        CHECK(sd.at(g) == doctest::Approx(std::sqrt(ss / 4.0)).epsilon(1e-12));
    }
    CHECK(std::filesystem::exists(res.dir / "seed-11" / "best.ckpt"));
    CHECK(std::filesystem::exists(res.dir / "config.ini"));

    // A second invocation finds everything done.
    auto again = run_experiment(cfg);
    CHECK(again.evaluated == 0);
    CHECK(again.skipped == 5);
    CHECK(again.rows == res.rows);
    CHECK(read_file(res.metrics_csv) == read_file(again.metrics_csv));

    auto other = cfg;
    other.backbone.n_layers = 2;
    CHECK_THROWS_AS(run_experiment(other), ConfigError);
}

TEST_CASE("interrupted runs resume without duplicates") {
    TempDir d("resume");
    auto cfg = tiny_run(d.path(), "r", "none");
    auto full = run_experiment(cfg);
    // Drop the progress of the last seed and leave its rows behind as if the
    // process had died after writing them.
    const auto progress = full.dir / "progress.txt";
    auto text = read_file(progress);
    std::istringstream is(text);
    std::string line, kept;
    while (std::getline(is, line))
        if (line.rfind("15 ", 0) != 0) kept += line + '\n';
    write_file(progress, kept);
    auto resumed = run_experiment(cfg);
    CHECK(resumed.evaluated == 1);
    CHECK(resumed.skipped == 4);
    std::map<std::string, int> keys;
    for (const auto& r : resumed.rows) ++keys[r.key()];
    for (const auto& [k, n] : keys) CHECK(n == 1);
    CHECK(resumed.rows == full.rows);
}

TEST_CASE("baseline runs use the random-init checkpoint") {
    TempDir d("base");
    auto cfg = tiny_run(d.path(), "b", "none");
    cfg.seeds = {21};
    auto res = run_experiment(cfg);
    auto init = load_checkpoint(res.dir / "seed-21" / "init.ckpt");
    CHECK(checkpoint_bytes(init) == checkpoint_bytes(random_checkpoint(cfg.backbone, 21)));
    CHECK_FALSE(std::filesystem::exists(res.dir / "seed-21" / "best.ckpt"));
    for (const auto& r : res.rows) {
        CHECK(r.objective == "none");
        CHECK(r.data_source == "none");
    }
    // Same evaluation stages as a pre-trained run.
    auto pre = tiny_run(d.path(), "p", "mae");
    pre.seeds = {21};
    CHECK(run_experiment(pre).eval_trace == res.eval_trace);
}

TEST_CASE("sweeps") {
    TempDir d("sweep");
    auto base = tiny_run(d.path(), "s", "none");
    base.seeds = {1, 2};
    auto s = sweep(SweepDimension::layers, {"1", "2"}, base);
    CHECK(s.child_runs == 4);
    CHECK(s.failures.empty());
    CHECK(s.run_ids == std::vector<std::string>{"s.layers=1", "s.layers=2"});
    std::set<std::pair<std::string, std::string>> groups;
    for (const auto& r : s.rows)
        if (r.seed == "mean" || r.seed == "std") groups.insert({r.run_id, r.seed});
    CHECK(groups.size() == 4);
    CHECK(std::filesystem::exists(s.combined_csv));
    CHECK(read_metrics_csv(s.combined_csv) == s.rows);

    // A single value reproduces run_experiment on the child config.
    auto one = sweep(SweepDimension::layers, {"1"}, base);
    auto direct = run_experiment(sweep_child(base, SweepDimension::layers, "1"));
    CHECK(one.rows == direct.rows);

    auto bad = sweep(SweepDimension::objective, {"none", "mae"}, [&] {
        auto b = base;
        b.run_id = "f";
        b.data.toy_series = 1;  // too few windows to pre-train on
        b.data.toy_length = 64;
        return b;
    }());
    REQUIRE(bad.failures.size() == 1);
    CHECK(bad.failures[0].value == "mae");
    CHECK(bad.child_runs == 2);
    CHECK_THROWS_AS(sweep_child(base, SweepDimension::layers, "many"), ConfigError);
    CHECK_THROWS_AS(sweep(SweepDimension::layers, {}, base), ConfigError);
}

TEST_CASE("metrics files") {
    TempDir d("metrics");
    std::vector<MetricRecord> rows = {{"r", "mae", "synthetic", 2, "classify", "toy", "linear", "accuracy", 0.5, "1"},
                                      {"r", "mae", "synthetic", 2, "classify", "toy", "linear", "accuracy", 0.7, "2"}};
    auto agg = aggregate_rows(rows);
    REQUIRE(agg.size() == 2);
    CHECK(agg[0].seed == "mean");
    CHECK(agg[0].value == doctest::Approx(0.6));
    CHECK(agg[1].seed == "std");
    CHECK(agg[1].value == doctest::Approx(std::sqrt(0.02)));
    write_metrics_csv(d / "m.csv", rows);
    CHECK(read_metrics_csv(d / "m.csv") == rows);
    write_file(d / "broken.csv", metric_csv_header() + "\nr,mae\n");
    CHECK_THROWS_AS(read_metrics_csv(d / "broken.csv"), ParseError);
}

TEST_CASE("exit codes") {
    CHECK(exit_code_for(ConfigError("x")) == 2);
    CHECK(exit_code_for(ContractError("x")) == 2);
    CHECK(exit_code_for(ShapeError("x")) == 2);
    CHECK(exit_code_for(ParseError("x")) == 3);
    CHECK(exit_code_for(IoError("x")) == 3);
    CHECK(exit_code_for(DomainError("x")) == 3);
    CHECK(exit_code_for(NumericError("x")) == 4);
    CHECK(exit_code_for(std::runtime_error("x")) == 1);
}

}  // TEST_SUITE
