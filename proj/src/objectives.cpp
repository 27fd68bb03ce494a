#include "tsrep/objectives.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "tsrep/errors.hpp"
#include "tsrep/util.hpp"

namespace tsrep {

namespace {

struct ObjectiveName {
    Objective objective;
    const char* name;
};

constexpr ObjectiveName kObjectiveNames[] = {
    {Objective::none, "none"},   {Objective::mae, "mae"},       {Objective::ntp, "ntp"},   {Objective::diffusion, "diffusion"},
    {Objective::jepa, "jepa"},   {Objective::lejepa, "lejepa"}, {Objective::dino, "dino"},
};

Tensor constant(Shape shape, std::vector<float> data) { return Tensor::from_data(std::move(shape), std::move(data)); }

// [B, N, D] constant with ones on masked patch rows.
Tensor row_indicator(std::span<const std::uint8_t> mask, std::size_t d) {
    std::vector<float> v(mask.size() * d, 0.0f);
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) std::fill_n(v.begin() + static_cast<std::ptrdiff_t>(i * d), d, 1.0f);
    return constant({mask.size(), d}, std::move(v));
}

std::vector<std::uint8_t> expand_rows(std::span<const std::uint8_t> mask, std::size_t d) {
    std::vector<std::uint8_t> out(mask.size() * d, 0);
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * d), d, std::uint8_t{1});
    return out;
}

Tensor pool_patches(const Tensor& latents) { return ops::mean(latents, 1); }

PatchBatch to_patches(const SeriesBatch& batch, std::size_t patch_len) { return patchify_batch(batch, patch_len); }

// Patch projections of [B, N, P] values with masked rows replaced by `token`,
// plus positions.
Tensor masked_tokens(const EncoderWeights& w, const Tensor& values, std::span<const std::uint8_t> mask,
                     const Tensor& token) {
    const std::size_t B = values.dim(0), N = values.dim(1);
    const std::size_t D = w.patch_embed.weight.dim(1);
    Tensor proj = apply_linear(w.patch_embed, values);
    const auto full_mask = expand_rows(mask, D);
    Tensor kept = ops::masked_fill(proj, full_mask, 0.0f);
    Tensor indicator = ops::reshape(row_indicator(mask, D), {B, N, D});
    return kept + indicator * token + ops::slice(w.position, 0, 0, N);
}

EncodeOptions encode_options(std::mt19937_64& rng, bool training) {
    EncodeOptions o;
    o.training = training;
    o.rng = &rng;
    return o;
}

void append_mlp(NamedTensors& out, const std::string& prefix, const Mlp& m) {
    append_parameters(out, prefix + ".in", m.in);
    append_parameters(out, prefix + ".out", m.out);
}

Mlp clone_mlp(const Mlp& m, bool requires_grad) {
    Mlp c{{m.in.weight.clone(), m.in.bias.clone()}, {m.out.weight.clone(), m.out.bias.clone()}};
    for (Tensor* t : {&c.in.weight, &c.in.bias, &c.out.weight, &c.out.bias}) t->set_requires_grad(requires_grad);
    return c;
}

void add_term(LossBreakdown& b, std::string name, double weight, const Tensor& value) {
    b.terms.push_back({std::move(name), weight, static_cast<double>(value.item())});
}

}  // namespace

std::string to_string(Objective objective) {
    for (const auto& n : kObjectiveNames)
        if (n.objective == objective) return n.name;
    throw ContractError("unknown objective");
}

Objective parse_objective(const std::string& name) {
    for (const auto& n : kObjectiveNames)
        if (name == n.name) return n.objective;
    throw ContractError("unknown objective '" + name + "'");
}

bool is_causal_objective(Objective o) { return o == Objective::ntp || o == Objective::diffusion; }
bool has_ema_teacher(Objective o) { return o == Objective::jepa || o == Objective::dino; }

const std::vector<Objective>& all_objectives() {
    static const std::vector<Objective> v = {Objective::mae,  Objective::ntp,    Objective::diffusion,
                                             Objective::jepa, Objective::lejepa, Objective::dino};
    return v;
}

MaskSpec MaskSpec::random(float ratio) {
    MaskSpec m;
    m.kind = Kind::random;
    m.ratio = ratio;
    return m;
}

MaskSpec MaskSpec::multi_block(std::size_t n_blocks, float per_block_ratio) {
    MaskSpec m;
    m.kind = Kind::multi_block;
    m.n_blocks = n_blocks;
    m.per_block_ratio = per_block_ratio;
    return m;
}

void MaskSpec::validate() const {
    if (kind == Kind::random) {
        if (!(ratio > 0.0f && ratio < 1.0f)) throw ContractError("mask: random ratio must be in (0, 1)");
    } else {
        if (n_blocks < 1) throw ContractError("mask: n_blocks must be >= 1");
        if (!(per_block_ratio > 0.0f && per_block_ratio * static_cast<float>(n_blocks) < 1.0f))
            throw ContractError("mask: total block fraction must be in (0, 1)");
    }
}

std::vector<std::uint8_t> sample_mask(const MaskSpec& spec, std::size_t n, std::mt19937_64& rng) {
    spec.validate();
    if (n < 2) throw ContractError("mask: need at least 2 patches to mask a strict subset");
    std::vector<std::uint8_t> mask(n, 0);
    if (spec.kind == MaskSpec::Kind::random) {
        const auto want = static_cast<std::size_t>(std::lround(spec.ratio * static_cast<double>(n)));
        const std::size_t count = std::clamp<std::size_t>(want, 1, n - 1);
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = 0; i < count; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, n - 1);
            std::swap(idx[i], idx[pick(rng)]);
            mask[idx[i]] = 1;
        }
        return mask;
    }
    const std::size_t len =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(spec.per_block_ratio * static_cast<double>(n))));
    const std::size_t covered = len * spec.n_blocks;
    if (covered >= n)
        throw ContractError("mask: " + std::to_string(spec.n_blocks) + " blocks of " + std::to_string(len) +
                            " patches exceed a sequence of " + std::to_string(n));
    // Stars and bars: block i starts at slot_i - i + i * len for a sorted
    // uniform subset of slots in [0, free + n_blocks).
    const std::size_t slots = n - covered + spec.n_blocks;
    std::vector<std::size_t> idx(slots);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < spec.n_blocks; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, slots - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    std::vector<std::size_t> chosen(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(spec.n_blocks));
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        const std::size_t start = chosen[i] - i + i * len;
        for (std::size_t j = 0; j < len; ++j) mask[start + j] = 1;
    }
    return mask;
}

DiffusionSchedule DiffusionSchedule::linear(std::size_t n_steps, double beta_start, double beta_end) {
    DiffusionSchedule s;
    s.n_steps = n_steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    if (n_steps < 1) throw ContractError("diffusion: n_steps must be >= 1");
    s.betas.resize(n_steps);
    s.alpha_bar.resize(n_steps);
    double prod = 1.0;
    for (std::size_t t = 0; t < n_steps; ++t) {
        const double frac = n_steps > 1 ? static_cast<double>(t) / static_cast<double>(n_steps - 1) : 0.0;
        s.betas[t] = beta_start + frac * (beta_end - beta_start);
        prod *= 1.0 - s.betas[t];
        s.alpha_bar[t] = prod;
    }
    s.validate();
    return s;
}

void DiffusionSchedule::validate() const {
    if (betas.size() != n_steps || alpha_bar.size() != n_steps) throw ContractError("diffusion: schedule not built");
    for (std::size_t t = 0; t < n_steps; ++t) {
        if (!(betas[t] > 0.0 && betas[t] < 1.0)) throw ContractError("diffusion: beta outside (0, 1)");
        if (t > 0 && betas[t] < betas[t - 1]) throw ContractError("diffusion: betas must ascend");
        if (t > 0 && !(alpha_bar[t] < alpha_bar[t - 1])) throw ContractError("diffusion: alpha_bar must decrease");
    }
}

double DiffusionSchedule::snr(std::size_t t) const {
    if (t < 1 || t > n_steps) throw ContractError("diffusion: step outside 1..n_steps");
    const double ab = alpha_bar[t - 1];
    return ab / (1.0 - ab);
}

double LossBreakdown::term(const std::string& name) const {
    for (const auto& t : terms)
        if (t.name == name) return t.value;
    throw ContractError("loss breakdown has no term '" + name + "'");
}

double LossBreakdown::recombined() const {
    double s = 0.0;
    for (const auto& t : terms) s += t.weight * t.value;
    return s;
}

Tensor masked_patch_mse(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> mask) {
    if (pred.shape() != target.shape() || pred.rank() != 3)
        throw ShapeError("masked_patch_mse: shapes " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    const std::size_t rows = pred.dim(0) * pred.dim(1), P = pred.dim(2);
    if (mask.size() != rows) throw ShapeError("masked_patch_mse: mask size mismatch");
    const auto count = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
    if (count == 0) throw ContractError("masked_patch_mse: no masked patches");
    Tensor w = ops::reshape(row_indicator(mask, P), pred.shape());
    return ops::sum(w * ops::square(pred - target)) * (1.0f / static_cast<float>(count * P));
}

Tensor horizon_mse(const Tensor& pred, const Tensor& patches, std::size_t h) {
    if (patches.rank() != 3 || pred.rank() != 3) throw ShapeError("horizon_mse: expected rank-3 inputs");
    const std::size_t B = patches.dim(0), N = patches.dim(1), P = patches.dim(2);
    if (h < 1) throw ContractError("horizon_mse: horizon must be >= 1");
    if (pred.dim(0) != B || pred.dim(1) != N || pred.dim(2) != h * P)
        throw ShapeError("horizon_mse: prediction " + shape_str(pred.shape()) + " does not match horizon " + std::to_string(h));
    if (N <= h) throw ContractError("horizon_mse: no position has " + std::to_string(h) + " future patches");
    const std::size_t V = N - h;
    std::vector<float> target(B * V * h * P);
    const auto src = patches.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < V; ++j)
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((b * N + j + 1) * P), h * P,
                        target.begin() + static_cast<std::ptrdiff_t>((b * V + j) * h * P));
    const Tensor t = constant({B, V, h * P}, std::move(target));
    return ops::mean(ops::square(ops::slice(pred, 1, 0, V) - t));
}

Tensor diffusion_corrupt(const Tensor& x, std::span<const float> alpha_bar, const Tensor& noise) {
    if (x.shape() != noise.shape() || x.rank() != 3) throw ShapeError("diffusion_corrupt: shape mismatch");
    const std::size_t rows = x.dim(0) * x.dim(1), P = x.dim(2);
    if (alpha_bar.size() != rows) throw ShapeError("diffusion_corrupt: one alpha_bar per patch required");
    std::vector<float> a(rows * P), c(rows * P);
    for (std::size_t r = 0; r < rows; ++r) {
        const float ab = alpha_bar[r];
        if (!(ab > 0.0f && ab <= 1.0f)) throw DomainError("diffusion_corrupt: alpha_bar outside (0, 1]");
        std::fill_n(a.begin() + static_cast<std::ptrdiff_t>(r * P), P, std::sqrt(ab));
        std::fill_n(c.begin() + static_cast<std::ptrdiff_t>(r * P), P, std::sqrt(1.0f - ab));
    }
    return x * constant(x.shape(), std::move(a)) + noise * constant(x.shape(), std::move(c));
}

VicRegTerms vicreg_terms(const Tensor& z) {
    if (z.rank() != 2 || z.dim(0) < 2) throw ShapeError("vicreg: expected [M >= 2, D]");
    const std::size_t M = z.dim(0), D = z.dim(1);
    const Tensor std_dev = ops::sqrt(ops::variance(z, 0) + 1e-4f);
    const Tensor hinge = ops::mean(ops::relu(-std_dev + 1.0f));
    const Tensor centred = z - ops::mean(z, 0);
    const Tensor cov = ops::matmul(ops::transpose(centred, 0, 1), centred) * (1.0f / static_cast<float>(M - 1));
    std::vector<std::uint8_t> diag(D * D, 0);
    for (std::size_t i = 0; i < D; ++i) diag[i * D + i] = 1;
    const Tensor off = ops::masked_fill(cov, diag, 0.0f);
    return {hinge, ops::sum(ops::square(off)) * (1.0f / static_cast<float>(D))};
}

Tensor dino_cross_entropy(const Tensor& student_logits, std::span<const float> teacher_logits,
                          std::span<const float> center, float student_temp, float teacher_temp) {
    if (!(student_temp > 0.0f) || !(teacher_temp > 0.0f)) throw ContractError("dino: temperatures must be positive");
    if (student_logits.rank() != 2) throw ShapeError("dino: student logits must be [B, K]");
    const std::size_t B = student_logits.dim(0), K = student_logits.dim(1);
    if (teacher_logits.size() != B * K || center.size() != K) throw ShapeError("dino: teacher logits or center size mismatch");
    std::vector<float> p(B * K);
    for (std::size_t b = 0; b < B; ++b) {
        double mx = -1e300;
        for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, (double(teacher_logits[b * K + k]) - center[k]) / teacher_temp);
        double z = 0.0;
        std::vector<double> e(K);
        for (std::size_t k = 0; k < K; ++k) {
            e[k] = std::exp((double(teacher_logits[b * K + k]) - center[k]) / teacher_temp - mx);
            z += e[k];
        }
        for (std::size_t k = 0; k < K; ++k) p[b * K + k] = static_cast<float>(e[k] / z);
    }
    const Tensor logp = ops::log_softmax(student_logits * (1.0f / student_temp));
    return -(ops::sum(constant({B, K}, std::move(p)) * logp) * (1.0f / static_cast<float>(B)));
}

void update_center(std::vector<float>& center, std::span<const float> batch_mean, float momentum) {
    if (center.size() != batch_mean.size()) throw ShapeError("dino: center size mismatch");
    for (std::size_t k = 0; k < center.size(); ++k)
        center[k] = momentum * center[k] + (1.0f - momentum) * batch_mean[k];
}

std::string to_string(SigregInput input) {
    switch (input) {
        case SigregInput::both: return "both";
        case SigregInput::global: return "global";
        case SigregInput::augmented: return "augmented";
    }
    return "both";
}

SigregInput parse_sigreg_input(const std::string& name) {
    if (name == "both") return SigregInput::both;
    if (name == "global") return SigregInput::global;
    if (name == "augmented") return SigregInput::augmented;
    throw ContractError("unknown sigreg input '" + name + "'");
}

void ObjectiveConfig::validate() const {
    mae_mask.validate();
    jepa_mask.validate();
    if (ntp_horizon < 1) throw ContractError("objectives: ntp_horizon must be >= 1");
    diffusion.validate();
    if (!(lejepa_lambda >= 0.0f && lejepa_lambda <= 1.0f)) throw ContractError("lejepa: lambda must be in [0, 1]");
    if (!(vicreg_variance >= 0.0f && vicreg_covariance >= 0.0f)) throw ContractError("jepa: vicreg weights must be >= 0");
    sigreg.validate();
    dwt.validate();
    dino_dwt.validate();
    for (const auto& s : global_suite) {
        s.validate();
        if (!is_stochastic(s.family)) throw ContractError("lejepa: global suite accepts stochastic transforms only");
    }
    if (dino_prototypes < 2) throw ContractError("dino: need at least 2 prototypes");
    if (!(dino_student_temp > 0.0f && dino_teacher_temp > 0.0f)) throw ContractError("dino: temperatures must be positive");
    if (!(dino_teacher_temp < dino_student_temp)) throw ContractError("dino: teacher temperature must be below student's");
    if (!(dino_center_momentum >= 0.0f && dino_center_momentum <= 1.0f)) throw ContractError("dino: center momentum in [0, 1]");
    if (!(ema_momentum >= 0.0f && ema_momentum <= 1.0f)) throw ContractError("ema momentum must be in [0, 1]");
}

Mlp make_mlp(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng) {
    return {make_linear(in, hidden, rng), make_linear(hidden, out, rng)};
}

Tensor apply_mlp(const Mlp& mlp, const Tensor& x) { return apply_linear(mlp.out, ops::gelu(apply_linear(mlp.in, x))); }

NamedTensors ObjectiveModel::trainable() const {
    NamedTensors out = encoder.named_parameters();
    for (auto& [name, t] : out) name = "encoder." + name;
    switch (objective) {
        case Objective::mae:
            out.emplace_back("mask_token", mask_token);
            append_parameters(out, "head", head);
            break;
        case Objective::ntp:
            append_parameters(out, "head", head);
            break;
        case Objective::diffusion:
            append_mlp(out, "decoder", decoder);
            break;
        case Objective::jepa:
            out.emplace_back("mask_token", mask_token);
            for (std::size_t i = 0; i < predictor.size(); ++i)
                append_parameters(out, "predictor." + std::to_string(i), predictor[i]);
            append_parameters(out, "predictor.norm", predictor_norm);
            break;
        case Objective::lejepa:
        case Objective::dino:
            append_mlp(out, "projector", projector);
            break;
        case Objective::none:
            break;
    }
    return out;
}

NamedTensors ObjectiveModel::teacher_parameters() const {
    NamedTensors out;
    if (!teacher) return out;
    out = teacher->named_parameters();
    for (auto& [name, t] : out) name = "teacher." + name;
    if (objective == Objective::dino) append_mlp(out, "teacher_projector", teacher_projector);
    return out;
}

ObjectiveModel make_objective_model(Objective objective, const BackboneConfig& backbone, const ObjectiveConfig& cfg,
                                    std::uint64_t seed) {
    cfg.validate();
    ObjectiveModel m;
    m.objective = objective;
    m.backbone = backbone;
    if (is_causal_objective(objective)) m.backbone.causal = true;
    m.backbone.validate();
    m.cfg = cfg;
    m.encoder = random_checkpoint(m.backbone, seed).weights;
    auto rng = make_rng(seed, 0x4ead);
    const std::size_t D = m.backbone.d_model, P = m.backbone.patch_len;
    switch (objective) {
        case Objective::mae:
            m.mask_token = Tensor::randn({D}, rng, 0.02f, true);
            m.head = make_linear(D, P, rng);
            break;
        case Objective::ntp:
            m.head = make_linear(D, cfg.ntp_horizon * P, rng);
            break;
        case Objective::diffusion:
            m.decoder = make_mlp(2 * D, 2 * D, P, rng);
            break;
        case Objective::jepa:
            m.mask_token = Tensor::randn({D}, rng, 0.02f, true);
            for (std::size_t i = 0; i < m.backbone.n_predictor_layers; ++i)
                m.predictor.push_back(make_transformer_layer(D, m.backbone.ffn_ratio, rng));
            m.predictor_norm = make_norm(D);
            m.teacher = m.encoder.clone();
            m.teacher->set_requires_grad(false);
            break;
        case Objective::lejepa:
            m.projector = make_mlp(D, D, D, rng);
            break;
        case Objective::dino:
            m.projector = make_mlp(D, D, cfg.dino_prototypes, rng);
            m.teacher = m.encoder.clone();
            m.teacher->set_requires_grad(false);
            m.teacher_projector = clone_mlp(m.projector, false);
            m.center.assign(cfg.dino_prototypes, 0.0f);
            break;
        case Objective::none:
            break;
    }
    return m;
}

SeriesBatch normalized_windows(const SeriesBatch& batch) {
    SeriesBatch out = batch;
    for (auto& s : out) instance_normalize(s);
    return out;
}

LossBreakdown mae_loss(const ObjectiveModel& model, const SeriesBatch& batch, std::mt19937_64& rng) {
    const auto patches = to_patches(batch, model.backbone.patch_len);
    const std::size_t B = patches.batch(), N = patches.n_patches();
    std::vector<std::uint8_t> mask;
    for (std::size_t b = 0; b < B; ++b) {
        const auto row = sample_mask(model.cfg.mae_mask, N, rng);
        mask.insert(mask.end(), row.begin(), row.end());
    }
    const auto opts = encode_options(rng, true);
    const Tensor tokens = masked_tokens(model.encoder, patches.values, mask, model.mask_token);
    const Tensor z = encode_embedded(tokens, model.encoder, model.backbone, {}, opts);
    const Tensor recon = apply_linear(model.head, z);
    LossBreakdown out;
    out.total = masked_patch_mse(recon, patches.values, mask);
    add_term(out, "reconstruction", 1.0, out.total);
    return out;
}

LossBreakdown ntp_loss(const ObjectiveModel& model, const SeriesBatch& batch) {
    if (!model.backbone.causal) throw ContractError("ntp: backbone must be causal");
    const auto patches = to_patches(batch, model.backbone.patch_len);
    const Tensor z = encode(patches, model.encoder, model.backbone);
    LossBreakdown out;
    out.total = horizon_mse(apply_linear(model.head, z), patches.values, model.cfg.ntp_horizon);
    add_term(out, "forecast", 1.0, out.total);
    return out;
}

LossBreakdown diffusion_loss(const ObjectiveModel& model, const SeriesBatch& batch, std::mt19937_64& rng) {
    if (!model.backbone.causal) throw ContractError("diffusion: backbone must be causal");
    const auto patches = to_patches(batch, model.backbone.patch_len);
    const std::size_t B = patches.batch(), N = patches.n_patches(), P = patches.patch_len();
    if (N < 2) throw ContractError("diffusion: need at least 2 patches");
    const auto opts = encode_options(rng, true);
    const Tensor context = ops::slice(encode(patches, model.encoder, model.backbone, opts), 1, 0, N - 1);
    const Tensor next = ops::slice(patches.values, 1, 1, N).detach();
    const auto& sched = model.cfg.diffusion;
    std::uniform_int_distribution<std::size_t> pick_t(1, sched.n_steps);
    std::vector<float> ab(B * (N - 1));
    for (auto& a : ab) a = static_cast<float>(sched.alpha_bar[pick_t(rng) - 1]);
    const Tensor noise = Tensor::randn({B, N - 1, P}, rng);
    const Tensor noised = diffusion_corrupt(next, ab, noise);
    const Tensor noised_embed =
        apply_linear(model.encoder.patch_embed, noised) + ops::slice(model.encoder.position, 0, 1, N);
    const Tensor pred = apply_mlp(model.decoder, ops::concat({noised_embed, context}, 2));
    LossBreakdown out;
    out.total = ops::mean(ops::square(pred - next));
    add_term(out, "denoise", 1.0, out.total);
    return out;
}

LossBreakdown jepa_loss(const ObjectiveModel& model, const SeriesBatch& batch, std::mt19937_64& rng) {
    if (!model.teacher) throw ContractError("jepa: model has no teacher");
    const auto patches = to_patches(batch, model.backbone.patch_len);
    const std::size_t B = patches.batch(), N = patches.n_patches(), D = model.backbone.d_model;
    std::vector<std::uint8_t> mask;
    for (std::size_t b = 0; b < B; ++b) {
        const auto row = sample_mask(model.cfg.jepa_mask, N, rng);
        mask.insert(mask.end(), row.begin(), row.end());
    }
    const auto opts = encode_options(rng, true);
    const Tensor tokens = masked_tokens(model.encoder, patches.values, mask, model.mask_token);
    const Tensor student = encode_embedded(tokens, model.encoder, model.backbone, {}, opts);
    const auto attn = attention_mask(B, model.backbone.n_heads, N, false, {});
    Tensor x = student;
    for (const auto& layer : model.predictor)
        x = transformer_layer(x, layer, model.backbone.n_heads, attn, model.backbone.dropout, opts);
    const Tensor pred = apply_norm(model.predictor_norm, x);
    Tensor target;
    {
        NoGradGuard no_grad;
        target = encode(patches, *model.teacher, model.backbone).detach();
    }
    const Tensor distill = masked_patch_mse(pred, target, mask);
    const auto vic = vicreg_terms(ops::reshape(student, {B * N, D}));
    LossBreakdown out;
    const float lv = model.cfg.vicreg_variance, lc = model.cfg.vicreg_covariance;
    out.total = distill + vic.variance * lv + vic.covariance * lc;
    add_term(out, "distill", 1.0, distill);
    add_term(out, "variance", lv, vic.variance);
    add_term(out, "covariance", lc, vic.covariance);
    return out;
}

ViewPair lejepa_views(const SeriesBatch& batch, const ObjectiveConfig& cfg, std::uint64_t seed) {
    ViewPair views = make_dwt_views(batch, cfg.dwt, derive_seed(seed, 1));
    auto rng = make_rng(seed, 2);
    for (const auto& spec : cfg.global_suite) views.teacher = stochastic_suite(views.teacher, spec, rng);
    views.provenance.extra = cfg.global_suite;
    return views;
}

LossBreakdown lejepa_loss(const ObjectiveModel& model, const ViewPair& views, std::uint64_t step) {
    const float lambda = model.cfg.lejepa_lambda;
    if (!(lambda >= 0.0f && lambda <= 1.0f)) throw ContractError("lejepa: lambda must be in [0, 1]");
    const auto g = to_patches(views.teacher, model.backbone.patch_len);
    const auto a = to_patches(views.student, model.backbone.patch_len);
    const Tensor zg = apply_mlp(model.projector, pool_patches(encode(g, model.encoder, model.backbone)));
    const Tensor za = apply_mlp(model.projector, pool_patches(encode(a, model.encoder, model.backbone)));
    const Tensor invariance = ops::mean(ops::square(zg - za));
    Tensor sig_input;
    switch (model.cfg.sigreg_input) {
        case SigregInput::both: sig_input = ops::concat({zg, za}, 0); break;
        case SigregInput::global: sig_input = zg; break;
        case SigregInput::augmented: sig_input = za; break;
    }
    const Tensor stat = epps_pulley_statistic(sig_input, model.cfg.sigreg, step);
    LossBreakdown out;
    out.total = invariance * (1.0f - lambda) + stat * lambda;
    add_term(out, "invariance", 1.0 - lambda, invariance);
    add_term(out, "sigreg", lambda, stat);
    return out;
}

LossBreakdown dino_loss(const ObjectiveModel& model, const ViewPair& views) {
    if (!model.teacher) throw ContractError("dino: model has no teacher");
    const auto s = to_patches(views.student, model.backbone.patch_len);
    const auto t = to_patches(views.teacher, model.backbone.patch_len);
    const Tensor student = apply_mlp(model.projector, pool_patches(encode(s, model.encoder, model.backbone)));
    Tensor teacher;
    {
        NoGradGuard no_grad;
        teacher = apply_mlp(model.teacher_projector, pool_patches(encode(t, *model.teacher, model.backbone))).detach();
    }
    LossBreakdown out;
    out.total = dino_cross_entropy(student, teacher.data(), model.center, model.cfg.dino_student_temp,
                                   model.cfg.dino_teacher_temp);
    add_term(out, "cross_entropy", 1.0, out.total);
    const std::size_t B = teacher.dim(0), K = teacher.dim(1);
    out.teacher_logit_mean.assign(K, 0.0f);
    for (std::size_t k = 0; k < K; ++k) {
        double acc = 0.0;
        for (std::size_t b = 0; b < B; ++b) acc += teacher[b * K + k];
        out.teacher_logit_mean[k] = static_cast<float>(acc / static_cast<double>(B));
    }
    return out;
}

LossBreakdown objective_loss(const ObjectiveModel& model, const SeriesBatch& batch, const StepContext& ctx) {
    if (batch.empty()) throw ContractError("objective_loss: empty batch");
    const SeriesBatch x = normalized_windows(batch);
    const std::uint64_t stream = derive_seed(ctx.seed, ctx.step);
    auto rng = make_rng(stream, 0);
    switch (model.objective) {
        case Objective::mae: return mae_loss(model, x, rng);
        case Objective::ntp: return ntp_loss(model, x);
        case Objective::diffusion: return diffusion_loss(model, x, rng);
        case Objective::jepa: return jepa_loss(model, x, rng);
        case Objective::lejepa: return lejepa_loss(model, lejepa_views(x, model.cfg, stream), ctx.step);
        case Objective::dino: return dino_loss(model, make_dwt_views(x, model.cfg.dino_dwt, stream));
        case Objective::none: break;
    }
    throw ContractError("objective 'none' has no pre-training loss");
}

void after_step(ObjectiveModel& model, const LossBreakdown& loss) {
    if (model.teacher) ema_update(*model.teacher, model.encoder, model.cfg.ema_momentum);
    if (model.objective == Objective::dino) {
        NamedTensors t, s;
        append_mlp(t, "p", model.teacher_projector);
        append_mlp(s, "p", model.projector);
        ema_update(t, s, model.cfg.ema_momentum);
        update_center(model.center, loss.teacher_logit_mean, model.cfg.dino_center_momentum);
    }
}

Tensor pooled_embeddings(const ObjectiveModel& model, const SeriesBatch& batch, bool use_projector) {
    NoGradGuard no_grad;
    const auto patches = to_patches(normalized_windows(batch), model.backbone.patch_len);
    Tensor z = pool_patches(encode(patches, model.encoder, model.backbone));
    const bool projected = model.objective == Objective::lejepa || model.objective == Objective::dino;
    if (use_projector && projected) z = apply_mlp(model.projector, z);
    return z.detach();
}

OptimConfig default_optim(Objective objective) {
    OptimConfig o;
    switch (objective) {
        case Objective::jepa:
            o.kind = OptimizerKind::sgd;
            o.lr = 1e-3f;
            o.weight_decay = 0.0f;
            break;
        case Objective::lejepa:
        case Objective::dino:
            o.lr = 1e-3f;
            break;
        default:
            o.lr = 3e-4f;
            break;
    }
    return o;
}

namespace {

BackboneCheckpoint snapshot(const ObjectiveModel& m, const PretrainConfig& run, std::uint32_t epoch) {
    BackboneCheckpoint c;
    c.config = m.backbone;
    c.weights = m.encoder.clone();
    c.objective = to_string(m.objective);
    c.data_source = run.data_source;
    c.seed = run.seed;
    c.epoch = epoch;
    return c;
}

nlohmann::json step_json(const StepRecord& r, double wall_ms) {
    nlohmann::json j;
    j["step"] = r.step;
    j["epoch"] = r.epoch;
    j["loss"] = r.loss;
    j["lr"] = r.lr;
    for (const auto& t : r.terms) j["terms"][t.name] = t.value;
    j["wall_ms"] = wall_ms;
    return j;
}

SeriesBatch gather(const SeriesBatch& corpus, std::span<const std::size_t> idx) {
    SeriesBatch b;
    b.reserve(idx.size());
    for (std::size_t i : idx) b.push_back(corpus[i]);
    return b;
}

}  // namespace

PretrainResult pretrain(Objective objective, const SeriesBatch& corpus, const BackboneConfig& backbone,
                        const ObjectiveConfig& cfg, const PretrainConfig& run) {
    if (objective == Objective::none) throw ContractError("pretrain: objective 'none' has nothing to train");
    if (run.batch_size < 2) throw ContractError("pretrain: batch_size must be >= 2");
    if (run.epochs < 1) throw ContractError("pretrain: epochs must be >= 1");
    if (!(run.val_fraction >= 0.0f && run.val_fraction < 1.0f)) throw ContractError("pretrain: val_fraction in [0, 1)");
    const std::size_t n_val = static_cast<std::size_t>(std::floor(run.val_fraction * static_cast<double>(corpus.size())));
    if (corpus.size() < n_val + 2) throw ContractError("pretrain: corpus exhausted before one training batch");
    const std::size_t n_train = corpus.size() - n_val;

    PretrainResult result;
    result.model = make_objective_model(objective, backbone, cfg, run.seed);
    ObjectiveModel& model = result.model;
    std::vector<Tensor> params;
    for (const auto& [name, t] : model.trainable()) params.push_back(t);
    Optimizer optim(params, run.optim.value_or(default_optim(objective)));

    std::vector<std::size_t> batches_start;
    for (std::size_t s = 0; s < n_train; s += run.batch_size)
        if (std::min(run.batch_size, n_train - s) >= 2) batches_start.push_back(s);
    std::size_t total = batches_start.size() * run.epochs;
    if (run.max_steps > 0) total = std::min(total, run.max_steps);

    std::ofstream log;
    if (!run.out_dir.empty()) {
        std::filesystem::create_directories(run.out_dir);
        log.open(run.out_dir / "progress.jsonl", std::ios::trunc);
        if (!log) throw IoError("pretrain: cannot open progress log in " + run.out_dir.string());
    }
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> val_idx(n_val);
    std::iota(val_idx.begin(), val_idx.end(), n_train);

    double best_val = std::numeric_limits<double>::infinity();
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < run.epochs && step < total; ++epoch) {
        std::vector<std::size_t> order(n_train);
        std::iota(order.begin(), order.end(), 0);
        auto shuffle_rng = make_rng(run.seed, 0xe90c0000ull + epoch);
        for (std::size_t i = n_train; i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(order[i - 1], order[pick(shuffle_rng)]);
        }
        double epoch_sum = 0.0;
        std::size_t epoch_steps = 0;
        for (std::size_t start : batches_start) {
            if (step >= total) break;
            const std::size_t len = std::min(run.batch_size, n_train - start);
            const auto batch = gather(corpus, std::span(order).subspan(start, len));
            LossBreakdown loss = objective_loss(model, batch, {run.seed, step, true});
            const double value = loss.value();
            if (!std::isfinite(value)) throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
            loss.total.backward();
            const double lr = one_cycle_lr(optim.config(), step, total);
            optim.step(lr);
            after_step(model, loss);
            StepRecord rec{step, epoch, value, loss.terms, lr};
            if (step == 0) result.initial_loss = value;
            if (log) {
                const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                log << step_json(rec, ms).dump() << '\n';
            }
            result.steps.push_back(std::move(rec));
            epoch_sum += value;
            ++epoch_steps;
            ++step;
        }
        const double train_mean = epoch_steps ? epoch_sum / static_cast<double>(epoch_steps) : 0.0;
        result.epoch_train_loss.push_back(train_mean);

        double val = train_mean;
        if (n_val >= 2) {
            NoGradGuard no_grad;
            double acc = 0.0;
            std::size_t count = 0;
            for (std::size_t s = 0; s < n_val; s += run.batch_size) {
                const std::size_t len = std::min(run.batch_size, n_val - s);
                if (len < 2) continue;
                const auto batch = gather(corpus, std::span(val_idx).subspan(s, len));
                acc += objective_loss(model, batch, {run.seed ^ 0x7a11dull, s, false}).value();
                ++count;
            }
            if (count) val = acc / static_cast<double>(count);
        }
        result.epoch_val_loss.push_back(val);
        if (val < best_val || result.best_checkpoint.weights.layers.empty()) {
            best_val = val;
            result.best_checkpoint = snapshot(model, run, static_cast<std::uint32_t>(epoch + 1));
        }
        result.final_checkpoint = snapshot(model, run, static_cast<std::uint32_t>(epoch + 1));
        if (!run.out_dir.empty()) {
            save_checkpoint(run.out_dir / "best.ckpt", result.best_checkpoint);
            save_checkpoint(run.out_dir / "final.ckpt", result.final_checkpoint);
        }
    }
    return result;
}

}  // namespace tsrep
