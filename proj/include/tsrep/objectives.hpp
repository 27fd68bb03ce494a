#pragma once

// The six pre-training objectives over the shared encoder, their auxiliary
// heads and teachers, and the pre-training loop.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tsrep/augment.hpp"
#include "tsrep/backbone.hpp"
#include "tsrep/optim.hpp"
#include "tsrep/sigreg.hpp"
#include "tsrep/tensor.hpp"

namespace tsrep {

enum class Objective { none, mae, ntp, diffusion, jepa, lejepa, dino };

std::string to_string(Objective objective);
Objective parse_objective(const std::string& name);
bool is_causal_objective(Objective objective);
bool has_ema_teacher(Objective objective);
const std::vector<Objective>& all_objectives();  // the six losses, excluding none

struct MaskSpec {
    enum class Kind { random, multi_block };
    Kind kind = Kind::random;
    float ratio = 0.4f;
    std::size_t n_blocks = 2;
    float per_block_ratio = 0.25f;

    static MaskSpec random(float ratio = 0.4f);
    static MaskSpec multi_block(std::size_t n_blocks = 2, float per_block_ratio = 0.25f);
    void validate() const;
};

// One entry per patch, nonzero = masked. Random masks hide
// clamp(round(ratio * n), 1, n - 1) patches; multi-block masks place
// non-overlapping contiguous blocks of round(per_block_ratio * n) patches.
std::vector<std::uint8_t> sample_mask(const MaskSpec& spec, std::size_t n_patches, std::mt19937_64& rng);

struct DiffusionSchedule {
    std::size_t n_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    std::vector<double> betas;      // index t - 1
    std::vector<double> alpha_bar;  // cumulative products

    static DiffusionSchedule linear(std::size_t n_steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
    void validate() const;
    double snr(std::size_t t) const;  // alpha_bar / (1 - alpha_bar), t in 1..n_steps
};

struct LossTerm {
    std::string name;
    double weight = 1.0;
    double value = 0.0;
};

struct LossBreakdown {
    Tensor total;
    std::vector<LossTerm> terms;  // total = sum weight * value
    std::vector<float> teacher_logit_mean;  // dino only, feeds the center update

    double value() const { return total.item(); }
    double term(const std::string& name) const;
    double recombined() const;
};

// Per-element mean squared error over the masked patches of [B, N, P].
Tensor masked_patch_mse(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> mask);

// Positions j with j + h < N predict patches j+1..j+h. pred is [B, N, h*P].
Tensor horizon_mse(const Tensor& pred, const Tensor& patches, std::size_t horizon);

// sqrt(abar) x + sqrt(1 - abar) eps
Tensor diffusion_corrupt(const Tensor& x, std::span<const float> alpha_bar, const Tensor& noise);

struct VicRegTerms {
    Tensor variance;
    Tensor covariance;
};

// z is [M, D]. Hinge mean_j max(0, 1 - sqrt(var_j + 1e-4)); covariance
// sum_{i != j} cov_ij^2 / D with the unbiased covariance.
VicRegTerms vicreg_terms(const Tensor& z);

// -sum p_teacher log p_student averaged over rows; teacher side constant.
Tensor dino_cross_entropy(const Tensor& student_logits, std::span<const float> teacher_logits,
                          std::span<const float> center, float student_temp, float teacher_temp);
// center <- momentum * center + (1 - momentum) * batch_mean
void update_center(std::vector<float>& center, std::span<const float> batch_mean, float momentum);

enum class SigregInput { both, global, augmented };
std::string to_string(SigregInput input);
SigregInput parse_sigreg_input(const std::string& name);

struct ObjectiveConfig {
    MaskSpec mae_mask = MaskSpec::random(0.4f);
    MaskSpec jepa_mask = MaskSpec::multi_block(2, 0.25f);
    std::size_t ntp_horizon = 4;
    DiffusionSchedule diffusion = DiffusionSchedule::linear();
    float vicreg_variance = 1.0f;
    float vicreg_covariance = 0.04f;
    float lejepa_lambda = 0.008f;
    EppsPulleyConfig sigreg;
    SigregInput sigreg_input = SigregInput::both;
    DwtConfig dwt;  // Le-JEPA student view
    DwtConfig dino_dwt;
    std::vector<TransformSpec> global_suite = default_stochastic_suite();
    std::size_t dino_prototypes = 256;
    float dino_student_temp = 0.1f;
    float dino_teacher_temp = 0.04f;
    float dino_center_momentum = 0.9f;
    float ema_momentum = 0.996f;

    void validate() const;
};

struct Mlp {
    Linear in, out;
};
Mlp make_mlp(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng);
Tensor apply_mlp(const Mlp& mlp, const Tensor& x);

// Encoder plus whatever the objective needs on top of it.
struct ObjectiveModel {
    Objective objective = Objective::none;
    BackboneConfig backbone;  // causal forced for ntp/diffusion
    ObjectiveConfig cfg;
    EncoderWeights encoder;
    Tensor mask_token;  // mae, jepa
    Linear head;        // mae: D -> P; ntp: D -> h*P
    Mlp decoder;        // diffusion: 2D -> 2D -> P
    std::vector<TransformerLayerWeights> predictor;  // jepa
    Norm predictor_norm;
    Mlp projector;  // lejepa: D -> D -> D; dino: D -> D -> K
    std::optional<EncoderWeights> teacher;  // jepa, dino
    Mlp teacher_projector;                  // dino
    std::vector<float> center;              // dino

    NamedTensors trainable() const;
    NamedTensors teacher_parameters() const;
};

// Encoder initialization matches random_checkpoint(backbone, seed).
ObjectiveModel make_objective_model(Objective objective, const BackboneConfig& backbone, const ObjectiveConfig& cfg,
                                    std::uint64_t seed);

struct StepContext {
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    bool training = true;
};

// Windows are instance-normalized copies of `batch`; all randomness comes
// from (ctx.seed, ctx.step), so equal contexts give equal losses.
LossBreakdown objective_loss(const ObjectiveModel& model, const SeriesBatch& batch, const StepContext& ctx);

// Individual objectives on already-normalized windows.
LossBreakdown mae_loss(const ObjectiveModel& model, const SeriesBatch& batch, std::mt19937_64& rng);
LossBreakdown ntp_loss(const ObjectiveModel& model, const SeriesBatch& batch);
LossBreakdown diffusion_loss(const ObjectiveModel& model, const SeriesBatch& batch, std::mt19937_64& rng);
LossBreakdown jepa_loss(const ObjectiveModel& model, const SeriesBatch& batch, std::mt19937_64& rng);
LossBreakdown lejepa_loss(const ObjectiveModel& model, const ViewPair& views, std::uint64_t step);
LossBreakdown dino_loss(const ObjectiveModel& model, const ViewPair& views);

// Le-JEPA global view: teacher DWT view followed by the stochastic suite.
ViewPair lejepa_views(const SeriesBatch& batch, const ObjectiveConfig& cfg, std::uint64_t seed);

// EMA teacher and DINO center updates after an optimizer step.
void after_step(ObjectiveModel& model, const LossBreakdown& loss);

// Per-sample projector embeddings [B, D] of clean windows (lejepa, dino) or
// patch-mean encoder latents otherwise.
Tensor pooled_embeddings(const ObjectiveModel& model, const SeriesBatch& batch, bool use_projector);

struct PretrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 128;
    std::size_t max_steps = 0;  // 0: run all epochs
    float val_fraction = 0.1f;
    std::uint64_t seed = 2003;
    std::string data_source = "synthetic";
    std::optional<OptimConfig> optim;  // defaults by objective when unset
    std::filesystem::path out_dir;     // empty: no files written
};

// SGD for JEPA, AdamW otherwise.
OptimConfig default_optim(Objective objective);

struct StepRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double loss = 0.0;
    std::vector<LossTerm> terms;
    double lr = 0.0;
};

struct PretrainResult {
    BackboneCheckpoint final_checkpoint;
    BackboneCheckpoint best_checkpoint;
    ObjectiveModel model;
    double initial_loss = 0.0;
    std::vector<double> epoch_train_loss;  // mean over the epoch's steps
    std::vector<double> epoch_val_loss;
    std::vector<StepRecord> steps;
};

PretrainResult pretrain(Objective objective, const SeriesBatch& corpus, const BackboneConfig& backbone,
                        const ObjectiveConfig& cfg, const PretrainConfig& run);

// Copy with each window instance-normalized.
SeriesBatch normalized_windows(const SeriesBatch& batch);

}  // namespace tsrep
