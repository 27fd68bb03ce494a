#include "tsrep/synthgen.hpp"

#include <Eigen/Cholesky>

#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <thread>

#include "tsrep/errors.hpp"
#include "tsrep/tensor_io.hpp"
#include "tsrep/util.hpp"

namespace tsrep {

namespace fs = std::filesystem;

std::string to_string(KernelFamily f) {
    switch (f) {
        case KernelFamily::exp_sine_squared: return "exp_sine_squared";
        case KernelFamily::rbf: return "rbf";
        case KernelFamily::rational_quadratic: return "rational_quadratic";
        case KernelFamily::dot_product: return "dot_product";
        case KernelFamily::white_noise: return "white_noise";
        case KernelFamily::constant: return "constant";
    }
    return "unknown";
}

void KernelAtom::validate() const {
    auto positive = [&](double v, const char* what) {
        if (!(v > 0.0) || !std::isfinite(v)) throw ContractError(to_string(family) + ": " + what + " must be > 0");
    };
    switch (family) {
        case KernelFamily::exp_sine_squared:
            positive(length_scale, "length_scale");
            positive(periodicity, "periodicity");
            break;
        case KernelFamily::rbf: positive(length_scale, "length_scale"); break;
        case KernelFamily::rational_quadratic:
            positive(length_scale, "length_scale");
            positive(alpha, "alpha");
            break;
        case KernelFamily::dot_product:
            if (!(sigma0 >= 0.0)) throw ContractError("dot_product: sigma0 must be >= 0");
            break;
        case KernelFamily::white_noise: positive(noise_level, "noise_level"); break;
        case KernelFamily::constant: positive(value, "value"); break;
    }
}

std::string KernelAtom::describe() const {
    std::ostringstream os;
    os << to_string(family) << '(';
    switch (family) {
        case KernelFamily::exp_sine_squared: os << "p=" << periodicity << ",l=" << length_scale; break;
        case KernelFamily::rbf: os << "l=" << length_scale; break;
        case KernelFamily::rational_quadratic: os << "l=" << length_scale << ",a=" << alpha; break;
        case KernelFamily::dot_product: os << "s0=" << sigma0; break;
        case KernelFamily::white_noise: os << "n=" << noise_level; break;
        case KernelFamily::constant: os << "c=" << value; break;
    }
    os << ')';
    return os.str();
}

double KernelAtom::operator()(double x, double y, bool same, std::size_t grid_len) const {
    const double d = x - y;
    switch (family) {
        case KernelFamily::exp_sine_squared: {
            if (grid_len < 2) throw ContractError("exp_sine_squared: grid needs at least 2 points");
            const double p = periodicity / static_cast<double>(grid_len - 1);
            const double s = std::sin(std::numbers::pi * std::abs(d) / p);
            return std::exp(-2.0 * s * s / (length_scale * length_scale));
        }
        case KernelFamily::rbf: return std::exp(-0.5 * d * d / (length_scale * length_scale));
        case KernelFamily::rational_quadratic:
            return std::pow(1.0 + d * d / (2.0 * alpha * length_scale * length_scale), -alpha);
        case KernelFamily::dot_product: return sigma0 * sigma0 + x * y;
        case KernelFamily::white_noise: return same ? noise_level : 0.0;
        case KernelFamily::constant: return value;
    }
    return 0.0;
}

void KernelComposition::validate() const {
    if (atoms.empty() || atoms.size() > 5) throw ContractError("kernel composition must have 1..5 atoms");
    if (ops.size() + 1 != atoms.size()) throw ContractError("kernel composition needs one operator between atoms");
    for (const auto& a : atoms) a.validate();
}

std::string KernelComposition::describe() const {
    std::string s = atoms.empty() ? "" : atoms[0].describe();
    for (std::size_t i = 0; i < ops.size(); ++i) s += (ops[i] == KernelOp::add ? " + " : " * ") + atoms[i + 1].describe();
    return s;
}

const std::vector<KernelAtom>& default_kernel_bank() {
    static const std::vector<KernelAtom> bank = [] {
        std::vector<KernelAtom> b;
        for (double p : {24.0, 168.0, 8766.0, 96.0, 672.0, 7.0, 365.0, 52.0, 12.0, 4.0, 30.0}) {
            KernelAtom a;
            a.family = KernelFamily::exp_sine_squared;
            a.periodicity = p;
            a.length_scale = 1.0;
            b.push_back(a);
        }
        for (double l : {0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0}) {
            KernelAtom a;
            a.family = KernelFamily::rbf;
            a.length_scale = l;
            b.push_back(a);
        }
        for (double l : {1.0, 5.0, 20.0})
            for (double alpha : {0.5, 2.0}) {
                KernelAtom a;
                a.family = KernelFamily::rational_quadratic;
                a.length_scale = l;
                a.alpha = alpha;
                b.push_back(a);
            }
        for (double s0 : {0.0, 1.0, 2.0}) {
            KernelAtom a;
            a.family = KernelFamily::dot_product;
            a.sigma0 = s0;
            b.push_back(a);
        }
        for (double n : {0.01, 0.1, 1.0}) {
            KernelAtom a;
            a.family = KernelFamily::white_noise;
            a.noise_level = n;
            b.push_back(a);
        }
        for (double c : {0.5, 1.0, 5.0}) {
            KernelAtom a;
            a.family = KernelFamily::constant;
            a.value = c;
            b.push_back(a);
        }
        return b;
    }();
    return bank;
}

KernelComposition sample_kernel_composition(std::mt19937_64& rng, const std::vector<KernelAtom>& bank,
                                            std::size_t max_kernels) {
    if (bank.empty()) throw ContractError("sample_kernel_composition: empty kernel bank");
    if (max_kernels < 1 || max_kernels > 5) throw ContractError("sample_kernel_composition: max_kernels must be in 1..5");
    std::uniform_int_distribution<std::size_t> count(1, max_kernels);
    std::uniform_int_distribution<std::size_t> pick(0, bank.size() - 1);
    std::bernoulli_distribution coin(0.5);
    KernelComposition c;
    const std::size_t k = count(rng);
    for (std::size_t i = 0; i < k; ++i) {
        c.atoms.push_back(bank[pick(rng)]);
        if (i > 0) c.ops.push_back(coin(rng) ? KernelOp::add : KernelOp::multiply);
    }
    return c;
}

KernelComposition sample_kernel_composition(std::mt19937_64& rng) {
    return sample_kernel_composition(rng, default_kernel_bank(), 5);
}

Eigen::MatrixXd gram_matrix(const KernelComposition& comp, std::size_t T) {
    comp.validate();
    if (T < 2) throw ContractError("gram_matrix: grid needs at least 2 points");
    const auto n = static_cast<Eigen::Index>(T);
    Eigen::MatrixXd K(n, n);
    const double step = 1.0 / static_cast<double>(T - 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double x = static_cast<double>(i) * step;
        for (Eigen::Index j = 0; j <= i; ++j) {
            const double y = static_cast<double>(j) * step;
            double v = comp.atoms[0](x, y, i == j, T);
            for (std::size_t a = 1; a < comp.atoms.size(); ++a) {
                const double k = comp.atoms[a](x, y, i == j, T);
                v = comp.ops[a - 1] == KernelOp::add ? v + k : v * k;
            }
            if (!std::isfinite(v)) throw DomainError("gram_matrix: non-finite kernel value for " + comp.describe());
            K(i, j) = v;
            K(j, i) = v;
        }
    }
    return K;
}

std::vector<double> sample_gp(const Eigen::MatrixXd& gram, std::mt19937_64& rng) {
    if (gram.rows() != gram.cols() || gram.rows() == 0) throw ShapeError("sample_gp: gram must be square");
    const Eigen::Index n = gram.rows();
    for (double jitter : {1e-6, 1e-5, 1e-4}) {
        Eigen::LLT<Eigen::MatrixXd> llt(gram + jitter * Eigen::MatrixXd::Identity(n, n));
        if (llt.info() != Eigen::Success) continue;
        std::normal_distribution<double> normal(0.0, 1.0);
        Eigen::VectorXd xi(n);
        for (Eigen::Index i = 0; i < n; ++i) xi(i) = normal(rng);
        const Eigen::VectorXd x = llt.matrixL() * xi;
        return std::vector<double>(x.data(), x.data() + n);
    }
    throw NumericError("sample_gp: Cholesky failed with jitter up to 1e-4");
}

void LcmConfig::validate() const {
    if (n_channels < 1) throw ContractError("lcm: n_channels must be >= 1");
    if (!(weibull_shape > 0.0 && weibull_scale > 0.0)) throw ContractError("lcm: Weibull parameters must be positive");
    if (latent_min < 1 || latent_max < latent_min) throw ContractError("lcm: latent clip bounds must satisfy 1 <= min <= max");
    if (!(alpha_lo > 0.0 && alpha_hi >= alpha_lo)) throw ContractError("lcm: Dirichlet alpha range invalid");
    if (length < 2) throw ContractError("lcm: series length must be >= 2");
    if (n_series < 1) throw ContractError("lcm: n_series must be >= 1");
    if (max_kernels < 1 || max_kernels > 5) throw ContractError("lcm: max_kernels must be in 1..5");
    if (shard_size < 1) throw ContractError("lcm: shard_size must be >= 1");
}

std::string LcmConfig::serialize() const {
    std::ostringstream os;
    os.precision(17);
    os << "n_channels=" << n_channels << "\nweibull_shape=" << weibull_shape << "\nweibull_scale=" << weibull_scale
       << "\nlatent_min=" << latent_min << "\nlatent_max=" << latent_max << "\nalpha_lo=" << alpha_lo
       << "\nalpha_hi=" << alpha_hi << "\nlength=" << length << "\nn_series=" << n_series
       << "\nmax_kernels=" << max_kernels << "\nshard_size=" << shard_size << '\n';
    return os.str();
}

std::size_t sample_latent_count(const LcmConfig& cfg, std::mt19937_64& rng) {
    std::weibull_distribution<double> w(cfg.weibull_shape, cfg.weibull_scale);
    const double j = std::round(w(rng));
    return static_cast<std::size_t>(
        std::clamp(j, static_cast<double>(cfg.latent_min), static_cast<double>(cfg.latent_max)));
}

std::vector<double> sample_dirichlet(double alpha, std::size_t k, std::mt19937_64& rng) {
    if (!(alpha > 0.0) || k < 1) throw ContractError("sample_dirichlet: need alpha > 0 and k >= 1");
    std::gamma_distribution<double> gamma(alpha, 1.0);
    std::vector<double> w(k);
    double sum = 0.0;
    for (auto& v : w) {
        v = gamma(rng);
        sum += v;
    }
    if (!(sum > 0.0)) {
        // Every draw underflowed: the limit of a tiny concentration is a vertex.
        std::uniform_int_distribution<std::size_t> pick(0, k - 1);
        std::fill(w.begin(), w.end(), 0.0);
        w[pick(rng)] = 1.0;
        return w;
    }
    for (auto& v : w) v /= sum;
    return w;
}

namespace {

std::vector<double> gp_series(const LcmConfig& cfg, std::mt19937_64& rng) {
    const auto comp = sample_kernel_composition(rng, default_kernel_bank(), cfg.max_kernels);
    return sample_gp(gram_matrix(comp, cfg.length), rng);
}

void standardize(std::vector<double>& x) {
    double m = 0.0;
    for (double v : x) m += v;
    m /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - m) * (v - m);
    var /= static_cast<double>(x.size());
    const double sd = var > 1e-24 ? std::sqrt(var) : 1.0;
    for (double& v : x) v = (v - m) / sd;
}

}  // namespace

LcmSample sample_multivariate_lcm(const LcmConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    LcmSample s;
    s.latent_count = sample_latent_count(cfg, rng);
    std::uniform_real_distribution<double> alpha(cfg.alpha_lo, cfg.alpha_hi);
    s.alpha = cfg.alpha_hi > cfg.alpha_lo ? alpha(rng) : cfg.alpha_lo;
    std::vector<std::vector<double>> latents;
    for (std::size_t j = 0; j < s.latent_count; ++j) latents.push_back(gp_series(cfg, rng));
    s.channels.assign(cfg.n_channels, std::vector<double>(cfg.length, 0.0));
    for (std::size_t c = 0; c < cfg.n_channels; ++c) {
        s.weights.push_back(sample_dirichlet(s.alpha, s.latent_count, rng));
        for (std::size_t j = 0; j < s.latent_count; ++j) {
            const double w = s.weights[c][j];
            if (w == 0.0) continue;
            for (std::size_t t = 0; t < cfg.length; ++t) s.channels[c][t] += w * latents[j][t];
        }
    }
    return s;
}

std::vector<double> sample_univariate(const LcmConfig& cfg, std::mt19937_64& rng) {
    auto x = gp_series(cfg, rng);
    standardize(x);
    return x;
}

std::string CorpusManifest::serialize() const {
    std::ostringstream os;
    os << "format=tsrep-corpus/1\n"
       << "n_series=" << n_series << "\nlength=" << length << "\nchannels=" << channels
       << "\nunivariate=" << (univariate ? 1 : 0) << "\nseed=" << seed << "\nconfig_digest=" << config_digest
       << "\nshard_count=" << shards.size() << '\n';
    for (std::size_t i = 0; i < shards.size(); ++i)
        os << "shard." << i << ".path=" << shards[i].path << "\nshard." << i << ".count=" << shards[i].count << '\n';
    return os.str();
}

CorpusManifest CorpusManifest::parse(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("manifest line " + std::to_string(lineno) + ": expected key=value");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const std::string& k) -> const std::string& {
        const auto it = kv.find(k);
        if (it == kv.end()) throw ParseError("manifest: missing key '" + k + "'");
        return it->second;
    };
    auto num = [&](const std::string& k) -> std::uint64_t {
        try {
            return std::stoull(get(k));
        } catch (const std::logic_error&) {
            throw ParseError("manifest: key '" + k + "' is not an unsigned integer");
        }
    };
    if (get("format") != "tsrep-corpus/1") throw ParseError("manifest: unsupported format '" + get("format") + "'");
    CorpusManifest m;
    m.n_series = num("n_series");
    m.length = num("length");
    m.channels = num("channels");
    m.univariate = num("univariate") != 0;
    m.seed = num("seed");
    m.config_digest = get("config_digest");
    const std::size_t n = num("shard_count");
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::string p = "shard." + std::to_string(i);
        m.shards.push_back({get(p + ".path"), num(p + ".count")});
        total += m.shards.back().count;
    }
    if (total != m.n_series) throw ParseError("manifest: shard counts do not sum to n_series");
    return m;
}

CorpusManifest generate_corpus(const LcmConfig& cfg, bool univariate, const fs::path& out, std::size_t n_workers,
                               std::uint64_t seed) {
    cfg.validate();
    if (n_workers < 1) throw ContractError("generate_corpus: n_workers must be >= 1");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("generate_corpus: cannot create " + out.string() + ": " + ec.message());

    const std::size_t C = univariate ? 1 : cfg.n_channels;
    const std::size_t T = cfg.length;
    CorpusManifest manifest;
    manifest.n_series = cfg.n_series;
    manifest.length = T;
    manifest.channels = C;
    manifest.univariate = univariate;
    manifest.seed = seed;
    manifest.config_digest = hex64(fnv1a64(cfg.serialize() + (univariate ? "univariate\n" : "multivariate\n")));

    const std::size_t n_shards = (cfg.n_series + cfg.shard_size - 1) / cfg.shard_size;
    for (std::size_t s = 0; s < n_shards; ++s) {
        const std::size_t first = s * cfg.shard_size;
        const std::size_t count = std::min(cfg.shard_size, cfg.n_series - first);
        std::vector<float> data(count * C * T);
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(n_workers);
        auto work = [&](std::size_t worker) {
            try {
                for (std::size_t k = next++; k < count; k = next++) {
                    auto rng = make_rng(derive_seed(seed, first + k));
                    float* dst = data.data() + k * C * T;
                    if (univariate) {
                        const auto x = sample_univariate(cfg, rng);
                        std::transform(x.begin(), x.end(), dst, [](double v) { return static_cast<float>(v); });
                    } else {
                        auto sample = sample_multivariate_lcm(cfg, rng);
                        for (std::size_t c = 0; c < C; ++c) {
                            standardize(sample.channels[c]);
                            std::transform(sample.channels[c].begin(), sample.channels[c].end(), dst + c * T,
                                           [](double v) { return static_cast<float>(v); });
                        }
                    }
                }
            } catch (...) {
                errors[worker] = std::current_exception();
            }
        };
        if (n_workers == 1) {
            work(0);
        } else {
            std::vector<std::jthread> pool;
            for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(work, w);
        }
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);

        char name[32];
        std::snprintf(name, sizeof name, "shard-%05zu.tsb", s);
        const fs::path final_path = out / name;
        const fs::path tmp = out / (std::string(name) + ".tmp");
        try {
            save_tsb(tmp, Tensor::from_data({count, C, T}, std::move(data)));
            fs::rename(tmp, final_path);
        } catch (const std::exception& e) {
            throw IoError("generate_corpus: shard " + std::to_string(s) + ": " + e.what());
        }
        manifest.shards.push_back({name, count});
    }

    const fs::path tmp = out / (std::string(kManifestName) + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        os << manifest.serialize();
        if (!os) throw IoError("generate_corpus: cannot write manifest in " + out.string());
    }
    fs::rename(tmp, out / kManifestName);
    return manifest;
}

CorpusManifest read_manifest(const fs::path& manifest_path) {
    std::ifstream is(manifest_path, std::ios::binary);
    if (!is) throw IoError("cannot open manifest " + manifest_path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return CorpusManifest::parse(ss.str());
}

std::vector<std::vector<float>> load_corpus_series(const fs::path& manifest_path) {
    const auto m = read_manifest(manifest_path);
    const fs::path dir = manifest_path.parent_path();
    std::vector<std::vector<float>> out;
    for (std::size_t s = 0; s < m.shards.size(); ++s) {
        const Tensor t = load_tsb(dir / m.shards[s].path);
        if (t.rank() != 3 || t.dim(0) != m.shards[s].count || t.dim(1) != m.channels || t.dim(2) != m.length)
            throw ParseError("corpus shard " + std::to_string(s) + " has shape " + shape_str(t.shape()) +
                             " inconsistent with the manifest");
        const auto d = t.data();
        const std::size_t rows = t.dim(0) * t.dim(1), T = t.dim(2);
        for (std::size_t r = 0; r < rows; ++r)
            out.emplace_back(d.begin() + static_cast<std::ptrdiff_t>(r * T), d.begin() + static_cast<std::ptrdiff_t>((r + 1) * T));
    }
    return out;
}

}  // namespace tsrep
