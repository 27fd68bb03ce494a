#include "tsrep/harness.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "tsrep/errors.hpp"
#include "tsrep/tensor_io.hpp"
#include "tsrep/util.hpp"

namespace tsrep {

namespace fs = std::filesystem;

std::string to_string(DataSource source) {
    switch (source) {
        case DataSource::real: return "real";
        case DataSource::synthetic: return "synthetic";
        case DataSource::hybrid: return "hybrid";
    }
    return "unknown";
}

DataSource parse_data_source(const std::string& name) {
    for (auto s : {DataSource::real, DataSource::synthetic, DataSource::hybrid})
        if (to_string(s) == name) return s;
    throw ConfigError("unknown data source '" + name + "' (expected real, synthetic or hybrid)");
}

std::string to_string(SweepDimension dim) {
    switch (dim) {
        case SweepDimension::layers: return "layers";
        case SweepDimension::data_source: return "data_source";
        case SweepDimension::objective: return "objective";
    }
    return "unknown";
}

SweepDimension parse_sweep_dimension(const std::string& name) {
    for (auto d : {SweepDimension::layers, SweepDimension::data_source, SweepDimension::objective})
        if (to_string(d) == name) return d;
    throw ConfigError("unknown sweep dimension '" + name + "' (expected layers, data_source or objective)");
}

OptimConfig OptimOverrides::resolve(Objective objective) const {
    OptimConfig c = default_optim(objective);
    if (kind) c.kind = *kind;
    if (lr) c.lr = *lr;
    if (weight_decay) c.weight_decay = *weight_decay;
    if (momentum) c.momentum = *momentum;
    if (warmup_fraction) c.warmup_fraction = *warmup_fraction;
    if (clip_norm) c.clip_norm = *clip_norm;
    return c;
}

// ---------------------------------------------------------------- config

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    return out;
}

template <class T>
T parse_number(const std::string& v) {
    T out{};
    const char* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end || v.empty()) throw ConfigError("'" + v + "' is not a valid number");
    if constexpr (std::is_floating_point_v<T>)
        if (!std::isfinite(out)) throw ConfigError("'" + v + "' is not finite");
    return out;
}

std::string fmt(double v) {
    char b[40];
    std::snprintf(b, sizeof b, "%.17g", v);
    return b;
}
std::string fmt(float v) {
    char b[40];
    std::snprintf(b, sizeof b, "%.9g", static_cast<double>(v));
    return b;
}

void parse_into(std::size_t& x, const std::string& v) { x = parse_number<std::size_t>(v); }
void parse_into(int& x, const std::string& v) { x = parse_number<int>(v); }
void parse_into(float& x, const std::string& v) { x = parse_number<float>(v); }
void parse_into(double& x, const std::string& v) { x = parse_number<double>(v); }
void parse_into(std::string& x, const std::string& v) { x = v; }
void parse_into(fs::path& x, const std::string& v) { x = v; }
void parse_into(bool& x, const std::string& v) {
    if (v == "true" || v == "1") x = true;
    else if (v == "false" || v == "0") x = false;
    else throw ConfigError("'" + v + "' is not a boolean (true or false)");
}
void parse_into(Objective& x, const std::string& v) {
    try {
        x = parse_objective(v);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}
void parse_into(DataSource& x, const std::string& v) { x = parse_data_source(v); }
void parse_into(ProbeMode& x, const std::string& v) { x = parse_probe_mode(v); }
void parse_into(SigregInput& x, const std::string& v) {
    try {
        x = parse_sigreg_input(v);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}
void parse_into(std::vector<std::size_t>& x, const std::string& v) {
    x.clear();
    if (v.empty()) return;
    for (const auto& p : split(v, ',')) x.push_back(parse_number<std::size_t>(p));
}
void parse_into(std::vector<TaskKind>& x, const std::string& v) {
    x.clear();
    if (v.empty()) return;
    for (const auto& p : split(v, ',')) x.push_back(parse_task(p));
}
void parse_into(std::vector<TransformSpec>& x, const std::string& v) {
    x.clear();
    if (v.empty()) return;
    for (const auto& p : split(v, ',')) {
        const auto kv = split(p, ':');
        if (kv.size() != 2) throw ConfigError("transform '" + p + "' must be family:magnitude");
        TransformSpec t;
        try {
            t.family = parse_transform_family(kv[0]);
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
        t.magnitude = parse_number<float>(kv[1]);
        x.push_back(t);
    }
}
void parse_into(std::optional<float>& x, const std::string& v) {
    if (v == "default") x.reset();
    else x = parse_number<float>(v);
}
void parse_into(std::optional<OptimizerKind>& x, const std::string& v) {
    if (v == "default") x.reset();
    else if (v == "adamw") x = OptimizerKind::adamw;
    else if (v == "sgd") x = OptimizerKind::sgd;
    else throw ConfigError("unknown optimizer '" + v + "' (expected default, adamw or sgd)");
}

std::string format_value(std::size_t x) { return std::to_string(x); }
std::string format_value(int x) { return std::to_string(x); }
std::string format_value(float x) { return fmt(x); }
std::string format_value(double x) { return fmt(x); }
std::string format_value(const std::string& x) { return x; }
std::string format_value(const fs::path& x) { return x.string(); }
std::string format_value(bool x) { return x ? "true" : "false"; }
std::string format_value(Objective x) { return to_string(x); }
std::string format_value(DataSource x) { return to_string(x); }
std::string format_value(ProbeMode x) { return to_string(x); }
std::string format_value(SigregInput x) { return to_string(x); }
std::string format_value(const std::vector<std::size_t>& x) {
    std::string s;
    for (std::size_t i = 0; i < x.size(); ++i) s += (i ? "," : "") + std::to_string(x[i]);
    return s;
}
std::string format_value(const std::vector<TaskKind>& x) {
    std::string s;
    for (std::size_t i = 0; i < x.size(); ++i) s += (i ? "," : "") + to_string(x[i]);
    return s;
}
std::string format_value(const std::vector<TransformSpec>& x) {
    std::string s;
    for (std::size_t i = 0; i < x.size(); ++i) s += (i ? "," : "") + to_string(x[i].family) + ":" + fmt(x[i].magnitude);
    return s;
}
std::string format_value(const std::optional<float>& x) { return x ? fmt(*x) : "default"; }
std::string format_value(const std::optional<OptimizerKind>& x) {
    if (!x) return "default";
    return *x == OptimizerKind::adamw ? "adamw" : "sgd";
}

struct Field {
    std::string section, key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class Access>
Field field(const char* section, const char* key, Access access) {
    return {section, key, [access](RunConfig& c, const std::string& v) { parse_into(access(c), v); },
            [access](const RunConfig& c) { return format_value(access(c)); }};
}

#define TSREP_FIELD(section, key, expr) field(section, key, [](auto& c) -> auto& { return expr; })

void add_dwt_fields(std::vector<Field>& f, const std::string& prefix, DwtConfig ObjectiveConfig::*member) {
    auto make = [&](const std::string& key, auto DwtConfig::*m) {
        f.push_back(field("augment", "", [member, m](auto& c) -> auto& { return (c.objective_cfg.*member).*m; }));
        f.back().key = prefix + key;
    };
    make("dwt_order", &DwtConfig::order);
    make("dwt_level", &DwtConfig::level);
    make("teacher_sigma", &DwtConfig::teacher_sigma);
    make("noise_lo", &DwtConfig::noise_lo);
    make("noise_hi", &DwtConfig::noise_hi);
    make("zero_out_fraction", &DwtConfig::zero_out_fraction);
    make("student_threshold", &DwtConfig::student_threshold);
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        f.push_back(TSREP_FIELD("run", "run_id", c.run_id));
        f.push_back(TSREP_FIELD("run", "objective", c.objective));
        f.push_back(TSREP_FIELD("run", "data_source", c.data_source));
        f.push_back(TSREP_FIELD("run", "seeds", c.seeds));
        f.push_back(TSREP_FIELD("run", "output_root", c.output_root));
        f.push_back(TSREP_FIELD("run", "workers", c.workers));

        f.push_back(TSREP_FIELD("backbone", "patch_len", c.backbone.patch_len));
        f.push_back(TSREP_FIELD("backbone", "d_model", c.backbone.d_model));
        f.push_back(TSREP_FIELD("backbone", "n_heads", c.backbone.n_heads));
        f.push_back(TSREP_FIELD("backbone", "n_layers", c.backbone.n_layers));
        f.push_back(TSREP_FIELD("backbone", "n_predictor_layers", c.backbone.n_predictor_layers));
        f.push_back(TSREP_FIELD("backbone", "ffn_ratio", c.backbone.ffn_ratio));
        f.push_back(TSREP_FIELD("backbone", "max_patches", c.backbone.max_patches));
        f.push_back(TSREP_FIELD("backbone", "dropout", c.backbone.dropout));

        f.push_back(TSREP_FIELD("pretrain", "epochs", c.pretrain.epochs));
        f.push_back(TSREP_FIELD("pretrain", "batch_size", c.pretrain.batch_size));
        f.push_back(TSREP_FIELD("pretrain", "max_steps", c.pretrain.max_steps));
        f.push_back(TSREP_FIELD("pretrain", "val_fraction", c.pretrain.val_fraction));
        f.push_back(TSREP_FIELD("pretrain", "optimizer", c.optim.kind));
        f.push_back(TSREP_FIELD("pretrain", "lr", c.optim.lr));
        f.push_back(TSREP_FIELD("pretrain", "weight_decay", c.optim.weight_decay));
        f.push_back(TSREP_FIELD("pretrain", "momentum", c.optim.momentum));
        f.push_back(TSREP_FIELD("pretrain", "warmup_fraction", c.optim.warmup_fraction));
        f.push_back(TSREP_FIELD("pretrain", "clip_norm", c.optim.clip_norm));

        f.push_back(TSREP_FIELD("objective", "mae_mask_ratio", c.objective_cfg.mae_mask.ratio));
        f.push_back(TSREP_FIELD("objective", "jepa_blocks", c.objective_cfg.jepa_mask.n_blocks));
        f.push_back(TSREP_FIELD("objective", "jepa_block_ratio", c.objective_cfg.jepa_mask.per_block_ratio));
        f.push_back(TSREP_FIELD("objective", "ntp_horizon", c.objective_cfg.ntp_horizon));
        f.push_back(TSREP_FIELD("objective", "diffusion_steps", c.objective_cfg.diffusion.n_steps));
        f.push_back(TSREP_FIELD("objective", "diffusion_beta_start", c.objective_cfg.diffusion.beta_start));
        f.push_back(TSREP_FIELD("objective", "diffusion_beta_end", c.objective_cfg.diffusion.beta_end));
        f.push_back(TSREP_FIELD("objective", "vicreg_variance", c.objective_cfg.vicreg_variance));
        f.push_back(TSREP_FIELD("objective", "vicreg_covariance", c.objective_cfg.vicreg_covariance));
        f.push_back(TSREP_FIELD("objective", "lejepa_lambda", c.objective_cfg.lejepa_lambda));
        f.push_back(TSREP_FIELD("objective", "ema_momentum", c.objective_cfg.ema_momentum));
        f.push_back(TSREP_FIELD("objective", "dino_prototypes", c.objective_cfg.dino_prototypes));
        f.push_back(TSREP_FIELD("objective", "dino_student_temp", c.objective_cfg.dino_student_temp));
        f.push_back(TSREP_FIELD("objective", "dino_teacher_temp", c.objective_cfg.dino_teacher_temp));
        f.push_back(TSREP_FIELD("objective", "dino_center_momentum", c.objective_cfg.dino_center_momentum));

        f.push_back(TSREP_FIELD("sigreg", "n_projections", c.objective_cfg.sigreg.n_projections));
        f.push_back(TSREP_FIELD("sigreg", "grid_points", c.objective_cfg.sigreg.grid_points));
        f.push_back(TSREP_FIELD("sigreg", "grid_max", c.objective_cfg.sigreg.grid_max));
        f.push_back(TSREP_FIELD("sigreg", "standardize", c.objective_cfg.sigreg.standardize));
        f.push_back(TSREP_FIELD("sigreg", "seed", c.objective_cfg.sigreg.seed));
        f.push_back(TSREP_FIELD("sigreg", "input", c.objective_cfg.sigreg_input));

        add_dwt_fields(f, "", &ObjectiveConfig::dwt);
        add_dwt_fields(f, "dino_", &ObjectiveConfig::dino_dwt);
        f.push_back(TSREP_FIELD("augment", "global_suite", c.objective_cfg.global_suite));

        f.push_back(TSREP_FIELD("data", "root", c.data.root));
        f.push_back(TSREP_FIELD("data", "synthetic", c.data.synthetic));
        f.push_back(TSREP_FIELD("data", "real", c.data.real));
        f.push_back(TSREP_FIELD("data", "hybrid_mix", c.data.hybrid_mix));
        f.push_back(TSREP_FIELD("data", "window", c.data.window));
        f.push_back(TSREP_FIELD("data", "stride", c.data.stride));
        f.push_back(TSREP_FIELD("data", "toy_series", c.data.toy_series));
        f.push_back(TSREP_FIELD("data", "toy_length", c.data.toy_length));
        f.push_back(TSREP_FIELD("data", "corpus_seed", c.data.corpus_seed));

        f.push_back(TSREP_FIELD("eval", "suite", c.eval.suite));
        f.push_back(TSREP_FIELD("eval", "tasks", c.eval.tasks));
        f.push_back(TSREP_FIELD("eval", "protocol", c.eval.protocol));
        f.push_back(TSREP_FIELD("eval", "probe_epochs", c.eval.probe_epochs));
        f.push_back(TSREP_FIELD("eval", "forecast_data", c.eval.forecast_data));
        f.push_back(TSREP_FIELD("eval", "context_len", c.eval.context_len));
        f.push_back(TSREP_FIELD("eval", "horizons", c.eval.horizons));
        f.push_back(TSREP_FIELD("eval", "forecast_stride", c.eval.forecast_stride));
        f.push_back(TSREP_FIELD("eval", "anomaly_data", c.eval.anomaly_data));
        f.push_back(TSREP_FIELD("eval", "anomaly_percentile", c.eval.anomaly_percentile));
        f.push_back(TSREP_FIELD("eval", "anomaly_window", c.eval.anomaly_window));
        return f;
    }();
    return table;
}

#undef TSREP_FIELD

std::string read_text(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_atomic(const fs::path& path, const std::string& text) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write " + tmp.string());
        os << text;
        os.flush();
        if (!os) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " into place: " + ec.message());
}

}  // namespace

std::vector<std::pair<std::string, std::vector<std::string>>> config_schema() {
    std::vector<std::pair<std::string, std::vector<std::string>>> out;
    for (const auto& f : fields()) {
        if (out.empty() || out.back().first != f.section) out.push_back({f.section, {}});
        out.back().second.push_back(f.key);
    }
    return out;
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    std::map<std::pair<std::string, std::string>, const Field*> index;
    std::set<std::string> sections;
    for (const auto& f : fields()) {
        index[{f.section, f.key}] = &f;
        sections.insert(f.section);
    }
    std::set<std::pair<std::string, std::string>> seen;
    std::string section;
    std::istringstream is(text);
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(is, raw)) {
        ++lineno;
        const std::string line = trim(raw);
        const std::string at = "config line " + std::to_string(lineno) + ": ";
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(at + "malformed section header '" + line + "'");
            section = trim(std::string_view(line).substr(1, line.size() - 2));
            if (!sections.count(section)) throw ConfigError(at + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(at + "expected key = value");
        if (section.empty()) throw ConfigError(at + "key outside any section");
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        const auto it = index.find({section, key});
        if (it == index.end()) throw ConfigError(at + "unknown key '" + key + "' in [" + section + "]");
        if (!seen.insert({section, key}).second) throw ConfigError(at + "duplicate key '" + key + "' in [" + section + "]");
        try {
            it->second->set(cfg, value);
        } catch (const std::exception& e) {
            throw ConfigError(at + section + "." + key + ": " + e.what());
        }
    }
    auto& d = cfg.objective_cfg.diffusion;
    try {
        d = DiffusionSchedule::linear(d.n_steps, d.beta_start, d.beta_end);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("objective.diffusion_*: ") + e.what());
    }
    return cfg;
}

void RunConfig::set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw ConfigError("override '" + assignment + "' must look like section.key=value");
    const std::string section = trim(std::string_view(assignment).substr(0, dot));
    const std::string key = trim(std::string_view(assignment).substr(dot + 1, eq - dot - 1));
    const std::string value = trim(std::string_view(assignment).substr(eq + 1));
    for (const auto& f : fields()) {
        if (f.section != section || f.key != key) continue;
        try {
            f.set(*this, value);
            auto& d = objective_cfg.diffusion;
            d = DiffusionSchedule::linear(d.n_steps, d.beta_start, d.beta_end);
        } catch (const std::exception& e) {
            throw ConfigError("override " + section + "." + key + ": " + e.what());
        }
        return;
    }
    throw ConfigError("override names unknown key '" + section + "." + key + "'");
}

RunConfig RunConfig::load(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

std::string RunConfig::serialize() const {
    std::string out, section;
    for (const auto& f : fields()) {
        if (f.section != section) {
            if (!section.empty()) out += '\n';
            section = f.section;
            out += "[" + section + "]\n";
        }
        out += f.key + " = " + f.get(*this) + '\n';
    }
    return out;
}

void RunConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (run_id.empty()) fail("run.run_id must not be empty");
    for (char ch : run_id)
        if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.' || ch == '='))
            fail("run.run_id may only contain letters, digits and _ - . =");
    if (seeds.empty()) fail("run.seeds must list at least one seed");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) fail("run.seeds contains duplicates");
    if (workers < 1) fail("run.workers must be >= 1");
    if (output_root.empty()) fail("run.output_root must not be empty");
    try {
        backbone.validate();
        objective_cfg.validate();
        objective_cfg.dwt.validate_for(data.window);
        objective_cfg.dino_dwt.validate_for(data.window);
        optim.resolve(objective).validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        fail(e.what());
    }
    if (pretrain.epochs < 1 && pretrain.max_steps == 0) fail("pretrain.epochs must be >= 1");
    if (pretrain.batch_size < 2) fail("pretrain.batch_size must be >= 2");
    if (!(pretrain.val_fraction >= 0.0f && pretrain.val_fraction < 1.0f)) fail("pretrain.val_fraction must be in [0, 1)");
    if (data.window == 0 || data.window % backbone.patch_len != 0) fail("data.window must be a positive multiple of backbone.patch_len");
    if (data.window / backbone.patch_len > backbone.max_patches) fail("data.window exceeds backbone.max_patches patches");
    if (data.stride == 0) fail("data.stride must be >= 1");
    if (data.hybrid_mix != "proportional") fail("data.hybrid_mix supports only 'proportional'");
    if (data.synthetic.empty()) fail("data.synthetic must be 'toy', a corpus directory or a manifest path");
    if (data.synthetic == "toy" && (data.toy_series == 0 || data.toy_length < data.window))
        fail("data.toy_series must be >= 1 and data.toy_length >= data.window");
    if ((data_source == DataSource::real || data_source == DataSource::hybrid) && data.real.empty() && objective != Objective::none)
        fail("data.real must name a manifest for the real and hybrid regimes");
    if (eval.suite != "toy" && eval.suite != "none") fail("eval.suite must be 'toy' or 'none'");
    if (eval.tasks.empty()) fail("eval.tasks must list at least one task");
    if (std::set<TaskKind>(eval.tasks.begin(), eval.tasks.end()).size() != eval.tasks.size()) fail("eval.tasks contains duplicates");
    if (!eval.forecast_data.empty()) {
        if (eval.horizons.empty()) fail("eval.horizons must list at least one horizon");
        for (auto h : eval.horizons)
            if (h == 0) fail("eval.horizons must be positive");
        if (eval.context_len < backbone.patch_len || eval.context_len / backbone.patch_len > backbone.max_patches)
            fail("eval.context_len must cover 1..max_patches patches");
        if (eval.forecast_stride == 0) fail("eval.forecast_stride must be >= 1");
    }
    if (!(eval.anomaly_percentile > 0.0 && eval.anomaly_percentile < 100.0)) fail("eval.anomaly_percentile must be in (0, 100)");
    if (eval.anomaly_window == 0 || eval.anomaly_window % backbone.patch_len != 0 ||
        eval.anomaly_window / backbone.patch_len > backbone.max_patches)
        fail("eval.anomaly_window must be a multiple of patch_len within max_patches");
    if (eval.suite == "none" && eval.forecast_data.empty() && eval.anomaly_data.empty())
        fail("eval.suite none needs eval.forecast_data or eval.anomaly_data");
}

fs::path RunConfig::data_root() const {
    if (const char* env = std::getenv("TSB_DATA_ROOT"); env != nullptr && *env != '\0') return fs::path(env);
    return data.root;
}

// ---------------------------------------------------------------- datasets

std::string DatasetManifest::serialize() const {
    std::ostringstream os;
    os << "format=tsrep-dataset/1\nname=" << name << "\ncolumns=";
    for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
    os << "\nrows=" << rows << "\nchannels=" << channels << "\ntrain_end=" << train_end << "\nval_end=" << val_end
       << "\nmean=";
    for (std::size_t i = 0; i < mean.size(); ++i) os << (i ? "," : "") << fmt(mean[i]);
    os << "\nstddev=";
    for (std::size_t i = 0; i < stddev.size(); ++i) os << (i ? "," : "") << fmt(stddev[i]);
    os << "\nlabels=" << labels_path << "\nchecksum=" << checksum << "\nshard_count=" << shards.size() << '\n';
    for (std::size_t i = 0; i < shards.size(); ++i)
        os << "shard." << i << ".path=" << shards[i].path << "\nshard." << i << ".rows=" << shards[i].rows << '\n';
    return os.str();
}

DatasetManifest DatasetManifest::parse(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("dataset manifest line " + std::to_string(lineno) + ": expected key=value");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const std::string& k) -> std::string {
        const auto it = kv.find(k);
        if (it == kv.end()) throw ParseError("dataset manifest: missing key '" + k + "'");
        return it->second;
    };
    auto num = [&](const std::string& k) {
        try {
            return parse_number<std::size_t>(get(k));
        } catch (const ConfigError&) {
            throw ParseError("dataset manifest: key '" + k + "' is not an unsigned integer");
        }
    };
    auto reals = [&](const std::string& k) {
        std::vector<double> out;
        try {
            for (const auto& p : split(get(k), ',')) out.push_back(parse_number<double>(p));
        } catch (const ConfigError&) {
            throw ParseError("dataset manifest: key '" + k + "' holds a non-numeric entry");
        }
        return out;
    };
    if (get("format") != "tsrep-dataset/1") throw ParseError("dataset manifest: unsupported format '" + get("format") + "'");
    DatasetManifest m;
    m.name = get("name");
    m.columns = split(get("columns"), ',');
    m.rows = num("rows");
    m.channels = num("channels");
    m.train_end = num("train_end");
    m.val_end = num("val_end");
    m.mean = reals("mean");
    m.stddev = reals("stddev");
    m.labels_path = get("labels");
    m.checksum = get("checksum");
    const std::size_t n = num("shard_count");
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::string p = "shard." + std::to_string(i);
        m.shards.push_back({get(p + ".path"), num(p + ".rows")});
        total += m.shards.back().rows;
    }
    if (total != m.rows) throw ParseError("dataset manifest: shard rows do not sum to rows");
    if (m.columns.size() != m.channels || m.mean.size() != m.channels || m.stddev.size() != m.channels)
        throw ParseError("dataset manifest: per-channel fields disagree with channels");
    if (!(m.train_end > 0 && m.train_end <= m.val_end && m.val_end <= m.rows))
        throw ParseError("dataset manifest: split boundaries out of order");
    return m;
}

DatasetManifest ingest_csv(const fs::path& csv, const CsvSchema& schema, const fs::path& out) {
    if (!(schema.train_fraction > 0.0 && schema.val_fraction >= 0.0 && schema.train_fraction + schema.val_fraction < 1.0))
        throw ContractError("ingest_csv: split fractions must leave a test split");
    if (schema.shard_rows == 0) throw ContractError("ingest_csv: shard_rows must be >= 1");
    std::ifstream is(csv, std::ios::binary);
    if (!is) throw IoError("ingest_csv: cannot open " + csv.string());

    std::vector<std::string> names;
    std::vector<std::vector<double>> cols;  // value columns
    std::vector<double> label_values;
    std::vector<int> role;  // 0 value, 1 timestamp, 2 label
    std::vector<std::size_t> value_slot;
    std::string line;
    std::size_t lineno = 0;
    bool have_layout = false;
    auto layout = [&](std::size_t n_fields, const std::vector<std::string>& header) {
        for (std::size_t i = 0; i < n_fields; ++i) names.push_back(header.empty() ? "col" + std::to_string(i) : header[i]);
        role.assign(n_fields, 0);
        auto find = [&](const std::string& want, int r) {
            const auto it = std::find(names.begin(), names.end(), want);
            if (it == names.end()) throw ParseError("ingest_csv: line 1: no column named '" + want + "'");
            role[static_cast<std::size_t>(it - names.begin())] = r;
        };
        if (schema.timestamp_column) find(*schema.timestamp_column, 1);
        if (schema.label_column) find(*schema.label_column, 2);
        value_slot.assign(n_fields, 0);
        std::size_t k = 0;
        for (std::size_t i = 0; i < n_fields; ++i)
            if (role[i] == 0) value_slot[i] = k++;
        if (k == 0) throw ParseError("ingest_csv: no value columns");
        cols.assign(k, {});
        have_layout = true;
    };
    while (std::getline(is, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const auto cells = split(line, ',');
        if (!have_layout) {
            if (schema.header) {
                layout(cells.size(), cells);
                continue;
            }
            layout(cells.size(), {});
        }
        if (cells.size() != role.size())
            throw ParseError("ingest_csv: line " + std::to_string(lineno) + ": expected " + std::to_string(role.size()) +
                             " fields, found " + std::to_string(cells.size()));
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (role[i] == 1) continue;
            double v = 0.0;
            try {
                v = parse_number<double>(cells[i]);
            } catch (const ConfigError&) {
                throw ParseError("ingest_csv: line " + std::to_string(lineno) + ", column '" + names[i] + "': '" +
                                 cells[i] + "' is not a finite number");
            }
            if (role[i] == 2) label_values.push_back(v);
            else cols[value_slot[i]].push_back(v);
        }
    }
    if (!have_layout || cols.front().empty()) throw ParseError("ingest_csv: " + csv.string() + " has no data rows");
    const std::size_t R = cols.front().size(), C = cols.size();
    if (R < 3) throw ParseError("ingest_csv: need at least 3 data rows for train/val/test splits");

    DatasetManifest m;
    m.name = csv.stem().string();
    for (std::size_t i = 0; i < role.size(); ++i)
        if (role[i] == 0) m.columns.push_back(names[i]);
    m.rows = R;
    m.channels = C;
    m.train_end = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(schema.train_fraction * static_cast<double>(R))));
    m.val_end = std::max(m.train_end, static_cast<std::size_t>(std::floor((schema.train_fraction + schema.val_fraction) * static_cast<double>(R))));
    for (std::size_t c = 0; c < C; ++c) {
        double mu = 0.0, var = 0.0;
        for (std::size_t r = 0; r < m.train_end; ++r) mu += cols[c][r];
        mu /= static_cast<double>(m.train_end);
        for (std::size_t r = 0; r < m.train_end; ++r) var += (cols[c][r] - mu) * (cols[c][r] - mu);
        const double sd = std::sqrt(var / static_cast<double>(m.train_end));
        m.mean.push_back(mu);
        m.stddev.push_back(sd > 1e-12 ? sd : 1.0);
    }

    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("ingest_csv: cannot create " + out.string() + ": " + ec.message());
    std::uint64_t digest = fnv1a64("tsrep-dataset");
    for (std::size_t r0 = 0, s = 0; r0 < R; r0 += schema.shard_rows, ++s) {
        const std::size_t r1 = std::min(R, r0 + schema.shard_rows);
        std::vector<float> v((r1 - r0) * C);
        for (std::size_t r = r0; r < r1; ++r)
            for (std::size_t c = 0; c < C; ++c)
                v[(r - r0) * C + c] = static_cast<float>((cols[c][r] - m.mean[c]) / m.stddev[c]);
        char name[32];
        std::snprintf(name, sizeof name, "shard-%05zu.tsb", s);
        const std::string bytes = tsb_bytes(Tensor::from_data({r1 - r0, C}, std::move(v)));
        digest = fnv1a64(bytes, digest);
        write_atomic(out / name, bytes);
        m.shards.push_back({name, r1 - r0});
    }
    if (!label_values.empty()) {
        std::vector<float> lv(label_values.begin(), label_values.end());
        const std::string bytes = tsb_bytes(Tensor::from_data({R}, std::move(lv)));
        digest = fnv1a64(bytes, digest);
        m.labels_path = "labels.tsb";
        write_atomic(out / m.labels_path, bytes);
    }
    m.checksum = hex64(digest);
    write_atomic(out / kDatasetManifestName, m.serialize());
    return m;
}

Dataset load_dataset(const fs::path& manifest_path) {
    Dataset d;
    d.manifest = DatasetManifest::parse(read_text(manifest_path));
    const auto& m = d.manifest;
    const fs::path dir = manifest_path.parent_path();
    d.channels.assign(m.channels, std::vector<float>(m.rows));
    std::uint64_t digest = fnv1a64("tsrep-dataset");
    std::size_t row = 0;
    for (const auto& s : m.shards) {
        const std::string bytes = read_text(dir / s.path);
        digest = fnv1a64(bytes, digest);
        std::istringstream is(bytes);
        const Tensor t = read_tsb(is);
        if (t.rank() != 2 || t.dim(0) != s.rows || t.dim(1) != m.channels)
            throw ParseError("dataset shard " + s.path + " has shape " + shape_str(t.shape()));
        for (std::size_t r = 0; r < s.rows; ++r)
            for (std::size_t c = 0; c < m.channels; ++c) d.channels[c][row + r] = t[r * m.channels + c];
        row += s.rows;
    }
    if (!m.labels_path.empty()) {
        const std::string bytes = read_text(dir / m.labels_path);
        digest = fnv1a64(bytes, digest);
        std::istringstream is(bytes);
        const Tensor t = read_tsb(is);
        if (t.numel() != m.rows) throw ParseError("dataset labels do not match the row count");
        for (float v : t.data()) d.labels.push_back(v != 0.0f ? 1 : 0);
    }
    if (hex64(digest) != m.checksum) throw ParseError("dataset " + manifest_path.string() + ": checksum mismatch");
    return d;
}

namespace {

void append_windows(SeriesBatch& out, std::span<const float> s, std::size_t window, std::size_t stride) {
    for (std::size_t st = 0; st + window <= s.size(); st += stride)
        out.emplace_back(s.begin() + static_cast<std::ptrdiff_t>(st), s.begin() + static_cast<std::ptrdiff_t>(st + window));
}

ToySuiteConfig toy_config(const RunConfig& cfg) {
    ToySuiteConfig t;
    t.window = cfg.data.window;
    t.corpus_series = cfg.data.toy_series;
    t.corpus_len = cfg.data.toy_length;
    t.corpus_stride = cfg.data.stride;
    return t;
}

SeriesBatch corpus_from(const RunConfig& cfg, const std::string& ref) {
    if (ref == "toy") return toy_pretrain_corpus(toy_config(cfg), cfg.data.corpus_seed);
    fs::path path = cfg.data_root() / ref;
    if (fs::is_directory(path))
        path /= fs::exists(path / kDatasetManifestName) ? kDatasetManifestName : kManifestName;
    const std::string text = read_text(path);
    SeriesBatch out;
    if (text.rfind("format=tsrep-dataset/", 0) == 0) {
        const Dataset d = load_dataset(path);
        for (const auto& ch : d.channels)
            append_windows(out, std::span<const float>(ch).subspan(0, d.manifest.train_end), cfg.data.window, cfg.data.stride);
    } else {
        for (const auto& s : load_corpus_series(path)) append_windows(out, s, cfg.data.window, cfg.data.stride);
    }
    if (out.empty()) throw ParseError("corpus " + path.string() + " yields no windows of length " + std::to_string(cfg.data.window));
    return out;
}

}  // namespace

SeriesBatch load_pretrain_corpus(const RunConfig& cfg) {
    switch (cfg.data_source) {
        case DataSource::synthetic: return corpus_from(cfg, cfg.data.synthetic);
        case DataSource::real: return corpus_from(cfg, cfg.data.real);
        case DataSource::hybrid: {
            // Uniform shuffling of the concatenation samples each corpus in
            // proportion to its size.
            SeriesBatch a = corpus_from(cfg, cfg.data.real);
            SeriesBatch b = corpus_from(cfg, cfg.data.synthetic);
            a.insert(a.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end()));
            return a;
        }
    }
    return {};
}

EvalSuite build_suite(const RunConfig& cfg, std::uint64_t seed, const std::vector<TaskKind>& tasks) {
    auto wants = [&](TaskKind t) { return std::find(tasks.begin(), tasks.end(), t) != tasks.end(); };
    EvalSuite suite;
    const ToySuiteConfig tc = toy_config(cfg);
    if (!cfg.eval.forecast_data.empty() && wants(TaskKind::forecast)) {
        const Dataset d = load_dataset(cfg.data_root() / cfg.eval.forecast_data);
        for (auto h : cfg.eval.horizons)
            suite.forecast.push_back(make_forecast_set(d.manifest.name, d.channels, d.manifest.train_end, d.manifest.val_end,
                                                       cfg.eval.context_len, h, cfg.eval.forecast_stride));
    }
    if (!cfg.eval.anomaly_data.empty() && wants(TaskKind::anomaly)) {
        const Dataset d = load_dataset(cfg.data_root() / cfg.eval.anomaly_data);
        if (d.labels.empty()) throw ParseError("anomaly dataset " + cfg.eval.anomaly_data + " has no label column");
        AnomalySet set;
        set.name = d.manifest.name;
        set.window_len = cfg.eval.anomaly_window;
        set.percentile = cfg.eval.anomaly_percentile;
        for (const auto& ch : d.channels) {
            set.train.emplace_back(ch.begin(), ch.begin() + static_cast<std::ptrdiff_t>(d.manifest.train_end));
            set.test.emplace_back(ch.begin() + static_cast<std::ptrdiff_t>(d.manifest.val_end), ch.end());
        }
        set.test_labels.assign(d.labels.begin() + static_cast<std::ptrdiff_t>(d.manifest.val_end), d.labels.end());
        suite.anomaly.push_back(std::move(set));
    }
    if (cfg.eval.suite == "toy") {
        if (wants(TaskKind::forecast)) suite.forecast.push_back(toy_forecast(tc, seed));
        if (wants(TaskKind::classify)) suite.classify.push_back(toy_classification(tc, seed));
        if (wants(TaskKind::anomaly)) suite.anomaly.push_back(toy_anomaly(tc, seed));
    }
    return suite;
}

// ---------------------------------------------------------------- metrics

std::vector<MetricRecord> read_metrics_csv(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open metrics file " + path.string());
    std::vector<MetricRecord> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (lineno == 1) {
            if (line != metric_csv_header()) throw ParseError(path.string() + ": unexpected metrics header");
            continue;
        }
        try {
            rows.push_back(parse_csv_row(line));
        } catch (const ParseError& e) {
            throw ParseError(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

void write_metrics_csv(const fs::path& path, const std::vector<MetricRecord>& rows) {
    std::set<std::string> keys;
    std::string text = metric_csv_header() + '\n';
    for (const auto& r : rows) {
        if (!keys.insert(r.key()).second) throw ContractError("duplicate metric row " + r.key());
        text += to_csv_row(r) + '\n';
    }
    write_atomic(path, text);
}

std::vector<MetricRecord> aggregate_rows(const std::vector<MetricRecord>& rows) {
    std::vector<std::string> order;
    std::map<std::string, std::pair<MetricRecord, std::vector<double>>> groups;
    for (const auto& r : rows) {
        if (r.seed == "mean" || r.seed == "std") continue;
        const std::string k = r.run_id + '|' + r.objective + '|' + r.data_source + '|' + std::to_string(r.layers) + '|' +
                              r.task + '|' + r.dataset + '|' + r.protocol + '|' + r.metric;
        auto [it, fresh] = groups.try_emplace(k, r, std::vector<double>{});
        if (fresh) order.push_back(k);
        it->second.second.push_back(r.value);
    }
    std::vector<MetricRecord> out;
    for (const auto& k : order) {
        const auto& [proto, v] = groups.at(k);
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
        MetricRecord m = proto;
        m.seed = "mean";
        m.value = mean;
        out.push_back(m);
        m.seed = "std";
        m.value = sd;
        out.push_back(m);
    }
    return out;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ContractError*>(&e)) return 2;
    if (dynamic_cast<const ParseError*>(&e) || dynamic_cast<const IoError*>(&e) || dynamic_cast<const DomainError*>(&e))
        return 3;
    if (dynamic_cast<const NumericError*>(&e)) return 4;
    return 1;
}

// ---------------------------------------------------------------- runs

namespace {

// Exclusive per-run lock; a lock left by a dead process is taken over.
class RunLock {
public:
    explicit RunLock(fs::path path) : path_(std::move(path)) {
        for (int attempt = 0; attempt < 2; ++attempt) {
            const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
            if (fd >= 0) {
                const std::string pid = std::to_string(::getpid()) + '\n';
                const auto written = ::write(fd, pid.data(), pid.size());
                ::close(fd);
                if (written != static_cast<ssize_t>(pid.size())) break;
                return;
            }
            std::ifstream is(path_);
            long owner = 0;
            is >> owner;
            if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno == EPERM))
                throw IoError("run directory is locked by process " + std::to_string(owner) + " (" + path_.string() + ")");
            std::error_code ec;
            fs::remove(path_, ec);
        }
        throw IoError("cannot acquire run lock " + path_.string());
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
};

std::string pair_key(std::uint64_t seed, const std::string& stage) { return std::to_string(seed) + ' ' + stage; }

std::set<std::string> read_progress(const fs::path& path) {
    std::set<std::string> done;
    if (!fs::exists(path)) return done;
    std::istringstream is(read_text(path));
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) done.insert(line);
    return done;
}

void write_progress(const fs::path& path, const std::set<std::string>& done) {
    std::string text;
    for (const auto& d : done) text += d + '\n';
    write_atomic(path, text);
}

EvalSuite only(const EvalSuite& suite, TaskKind task) {
    EvalSuite s;
    if (task == TaskKind::forecast) s.forecast = suite.forecast;
    if (task == TaskKind::classify) s.classify = suite.classify;
    if (task == TaskKind::anomaly) s.anomaly = suite.anomaly;
    return s;
}

}  // namespace

RunResult run_experiment(const RunConfig& cfg) {
    cfg.validate();
    RunResult result;
    result.dir = cfg.output_root / cfg.run_id;
    std::error_code ec;
    fs::create_directories(result.dir, ec);
    if (ec) throw IoError("cannot create run directory " + result.dir.string() + ": " + ec.message());
    RunLock lock(result.dir / "run.lock");

    // A run directory belongs to exactly one configuration; output_root is
    // excluded so a moved tree still resumes.
    RunConfig identity = cfg;
    identity.output_root = "runs";
    identity.workers = 1;
    const std::string snapshot = identity.serialize();
    const fs::path config_path = result.dir / "config.ini";
    if (fs::exists(config_path)) {
        if (read_text(config_path) != snapshot)
            throw ConfigError("run directory " + result.dir.string() + " holds a different configuration; choose a new run_id");
    } else {
        write_atomic(config_path, snapshot);
    }

    const fs::path progress_path = result.dir / "progress.txt";
    result.metrics_csv = result.dir / "metrics.csv";
    std::set<std::string> done = read_progress(progress_path);
    std::vector<MetricRecord> rows;
    if (fs::exists(result.metrics_csv))
        for (auto& r : read_metrics_csv(result.metrics_csv))
            // Rows of a pair the progress file does not record are partial
            // output of an interrupted run and are recomputed.
            if (r.seed != "mean" && r.seed != "std" && done.count(r.seed + ' ' + r.task)) rows.push_back(std::move(r));

    auto persist = [&] {
        auto all = rows;
        const auto agg = aggregate_rows(rows);
        all.insert(all.end(), agg.begin(), agg.end());
        write_metrics_csv(result.metrics_csv, all);
    };

    std::optional<SeriesBatch> corpus;
    const std::string source = cfg.objective == Objective::none ? "none" : to_string(cfg.data_source);
    for (const std::uint64_t seed : cfg.seeds) {
        std::vector<TaskKind> pending;
        for (auto t : cfg.eval.tasks) {
            if (done.count(pair_key(seed, to_string(t)))) ++result.skipped;
            else pending.push_back(t);
        }
        if (pending.empty()) continue;

        const fs::path seed_dir = result.dir / ("seed-" + std::to_string(seed));
        fs::create_directories(seed_dir);
        BackboneCheckpoint ckpt;
        if (cfg.objective == Objective::none) {
            ckpt = random_checkpoint(cfg.backbone, seed);
            if (!fs::exists(seed_dir / "init.ckpt")) save_checkpoint(seed_dir / "init.ckpt", ckpt);
        } else if (done.count(pair_key(seed, "pretrain")) && fs::exists(seed_dir / "best.ckpt")) {
            ckpt = load_checkpoint(seed_dir / "best.ckpt");
        } else {
            if (!corpus) corpus = load_pretrain_corpus(cfg);
            PretrainConfig p = cfg.pretrain;
            p.seed = seed;
            p.data_source = source;
            p.optim = cfg.optim.resolve(cfg.objective);
            p.out_dir = seed_dir;
            ckpt = pretrain(cfg.objective, *corpus, cfg.backbone, cfg.objective_cfg, p).best_checkpoint;
            done.insert(pair_key(seed, "pretrain"));
            write_progress(progress_path, done);
        }

        const EvalSuite suite = build_suite(cfg, seed, pending);
        const RunLabels labels{cfg.run_id, to_string(cfg.objective), source, seed};
        for (auto task : pending) {
            EvalReport report = evaluate_checkpoint(ckpt, only(suite, task), cfg.eval.protocol, labels, cfg.eval.probe_epochs);
            result.eval_trace.insert(result.eval_trace.end(), report.trace.begin(), report.trace.end());
            rows.insert(rows.end(), report.rows.begin(), report.rows.end());
            persist();
            done.insert(pair_key(seed, to_string(task)));
            write_progress(progress_path, done);
            ++result.evaluated;
        }
    }
    persist();
    result.rows = read_metrics_csv(result.metrics_csv);
    return result;
}

RunConfig sweep_child(const RunConfig& base, SweepDimension dim, const std::string& value) {
    RunConfig c = base;
    try {
        switch (dim) {
            case SweepDimension::layers: c.backbone.n_layers = parse_number<std::size_t>(value); break;
            case SweepDimension::data_source: c.data_source = parse_data_source(value); break;
            case SweepDimension::objective: parse_into(c.objective, value); break;
        }
    } catch (const std::exception& e) {
        throw ConfigError("sweep " + to_string(dim) + " value '" + value + "': " + e.what());
    }
    c.run_id = base.run_id + "." + to_string(dim) + "=" + value;
    c.validate();
    return c;
}

SweepResult sweep(SweepDimension dim, const std::vector<std::string>& values, const RunConfig& base) {
    base.validate();
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    std::vector<RunConfig> children;
    for (const auto& v : values) children.push_back(sweep_child(base, dim, v));

    SweepResult out;
    std::vector<std::optional<RunResult>> results(children.size());
    std::vector<std::string> errors(children.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < children.size(); i = next++) {
            try {
                results[i] = run_experiment(children[i]);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    const std::size_t n_workers = std::min(base.workers, children.size());
    if (n_workers <= 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(work);
    }

    for (std::size_t i = 0; i < children.size(); ++i) {
        out.run_ids.push_back(children[i].run_id);
        if (!results[i]) {
            out.failures.push_back({values[i], errors[i]});
            continue;
        }
        out.child_runs += children[i].seeds.size();
        out.rows.insert(out.rows.end(), results[i]->rows.begin(), results[i]->rows.end());
    }
    fs::create_directories(base.output_root);
    out.combined_csv = base.output_root / (base.run_id + ".sweep-" + to_string(dim) + ".csv");
    write_metrics_csv(out.combined_csv, out.rows);
    const fs::path failures = base.output_root / (base.run_id + ".sweep-" + to_string(dim) + ".failures.txt");
    if (out.failures.empty()) {
        std::error_code ec;
        fs::remove(failures, ec);
    } else {
        std::string text;
        for (const auto& f : out.failures) text += f.value + ": " + f.message + '\n';
        write_atomic(failures, text);
    }
    return out;
}

}  // namespace tsrep
