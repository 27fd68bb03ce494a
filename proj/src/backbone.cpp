#include "tsrep/backbone.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "tsrep/errors.hpp"
#include "tsrep/tensor_io.hpp"
#include "tsrep/util.hpp"

namespace tsrep {

std::size_t BackboneConfig::default_heads(std::size_t d_model) {
    if (d_model == 128) return 16;
    if (d_model == 256) return 8;
    // Keep a 16-wide head when the rule above does not apply.
    return std::max<std::size_t>(1, d_model / 16);
}

void BackboneConfig::validate() const {
    if (patch_len < 1) throw ContractError("backbone: patch_len must be >= 1");
    if (n_layers < 1) throw ContractError("backbone: n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
        throw ContractError("backbone: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                            std::to_string(n_heads));
    if (ffn_ratio < 1) throw ContractError("backbone: ffn_ratio must be >= 1");
    if (max_patches < 1) throw ContractError("backbone: max_patches must be >= 1");
    if (dropout < 0.0f || dropout >= 1.0f) throw ContractError("backbone: dropout must be in [0, 1)");
}

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(in));
    return {Tensor::uniform({in, out}, rng, -bound, bound, true), Tensor::uniform({out}, rng, -bound, bound, true)};
}

Tensor apply_linear(const Linear& layer, const Tensor& x) { return ops::matmul(x, layer.weight) + layer.bias; }

Norm make_norm(std::size_t d) { return {Tensor::full({d}, 1.0f, true), Tensor::zeros({d}, true)}; }

Tensor apply_norm(const Norm& norm, const Tensor& x) { return ops::layer_norm(x) * norm.gain + norm.bias; }

TransformerLayerWeights make_transformer_layer(std::size_t d_model, std::size_t ffn_ratio, std::mt19937_64& rng) {
    TransformerLayerWeights l;
    l.attn_norm = make_norm(d_model);
    l.query = make_linear(d_model, d_model, rng);
    l.key = make_linear(d_model, d_model, rng);
    l.value = make_linear(d_model, d_model, rng);
    l.out = make_linear(d_model, d_model, rng);
    l.ffn_norm = make_norm(d_model);
    l.ffn_in = make_linear(d_model, d_model * ffn_ratio, rng);
    l.ffn_out = make_linear(d_model * ffn_ratio, d_model, rng);
    return l;
}

void append_parameters(NamedTensors& out, const std::string& prefix, const Linear& layer) {
    out.emplace_back(prefix + ".weight", layer.weight);
    out.emplace_back(prefix + ".bias", layer.bias);
}

void append_parameters(NamedTensors& out, const std::string& prefix, const Norm& norm) {
    out.emplace_back(prefix + ".gain", norm.gain);
    out.emplace_back(prefix + ".bias", norm.bias);
}

void append_parameters(NamedTensors& out, const std::string& prefix, const TransformerLayerWeights& l) {
    append_parameters(out, prefix + ".attn_norm", l.attn_norm);
    append_parameters(out, prefix + ".query", l.query);
    append_parameters(out, prefix + ".key", l.key);
    append_parameters(out, prefix + ".value", l.value);
    append_parameters(out, prefix + ".out", l.out);
    append_parameters(out, prefix + ".ffn_norm", l.ffn_norm);
    append_parameters(out, prefix + ".ffn_in", l.ffn_in);
    append_parameters(out, prefix + ".ffn_out", l.ffn_out);
}

NamedTensors EncoderWeights::named_parameters() const {
    NamedTensors out;
    append_parameters(out, "patch_embed", patch_embed);
    out.emplace_back("position", position);
    for (std::size_t i = 0; i < layers.size(); ++i) append_parameters(out, "layers." + std::to_string(i), layers[i]);
    append_parameters(out, "final_norm", final_norm);
    return out;
}

std::vector<Tensor> EncoderWeights::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

namespace {

Linear clone(const Linear& l) { return {l.weight.clone(), l.bias.clone()}; }
Norm clone(const Norm& n) { return {n.gain.clone(), n.bias.clone()}; }

}  // namespace

EncoderWeights EncoderWeights::clone() const {
    EncoderWeights w;
    w.patch_embed = tsrep::clone(patch_embed);
    w.position = position.clone();
    for (const auto& l : layers) {
        TransformerLayerWeights c;
        c.attn_norm = tsrep::clone(l.attn_norm);
        c.query = tsrep::clone(l.query);
        c.key = tsrep::clone(l.key);
        c.value = tsrep::clone(l.value);
        c.out = tsrep::clone(l.out);
        c.ffn_norm = tsrep::clone(l.ffn_norm);
        c.ffn_in = tsrep::clone(l.ffn_in);
        c.ffn_out = tsrep::clone(l.ffn_out);
        w.layers.push_back(std::move(c));
    }
    w.final_norm = tsrep::clone(final_norm);
    return w;
}

void EncoderWeights::set_requires_grad(bool value) const {
    for (auto& [name, t] : named_parameters()) {
        Tensor handle = t;
        handle.set_requires_grad(value);
    }
}

EncoderWeights init_encoder(const BackboneConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    EncoderWeights w;
    w.patch_embed = make_linear(cfg.patch_len, cfg.d_model, rng);
    w.position = Tensor::randn({cfg.max_patches, cfg.d_model}, rng, 0.02f, true);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) w.layers.push_back(make_transformer_layer(cfg.d_model, cfg.ffn_ratio, rng));
    w.final_norm = make_norm(cfg.d_model);
    return w;
}

std::vector<std::vector<float>> flatten_channels(const Tensor& series) {
    if (series.rank() != 2 || series.numel() == 0) throw ContractError("flatten_channels: expected non-empty [T, C] array");
    const std::size_t T = series.dim(0);
    const std::size_t C = series.dim(1);
    std::vector<std::vector<float>> out(C, std::vector<float>(T));
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c) out[c][t] = series[t * C + c];
    return out;
}

InstanceStats instance_normalize(std::span<float> series, float eps) {
    if (series.empty()) throw ContractError("instance_normalize: empty series");
    double m = 0.0;
    for (float v : series) m += v;
    m /= static_cast<double>(series.size());
    double var = 0.0;
    for (float v : series) var += (v - m) * (v - m);
    var /= static_cast<double>(series.size());
    const double sd = std::sqrt(var + eps);
    for (auto& v : series) v = static_cast<float>((v - m) / sd);
    return {static_cast<float>(m), static_cast<float>(sd)};
}

void instance_denormalize(std::span<float> values, const InstanceStats& stats) {
    for (auto& v : values) v = v * stats.stddev + stats.mean;
}

PatchBatch patchify(std::span<const float> series, std::size_t patch_len) {
    if (patch_len < 1) throw ContractError("patchify: patch_len must be >= 1");
    if (series.size() < patch_len) {
        throw ContractError("patchify: series length " + std::to_string(series.size()) + " < patch_len " +
                            std::to_string(patch_len));
    }
    const std::size_t n = series.size() / patch_len;
    std::vector<float> values(series.begin(), series.begin() + static_cast<std::ptrdiff_t>(n * patch_len));
    return {Tensor::from_data({1, n, patch_len}, std::move(values)), std::vector<std::uint8_t>(n, 0)};
}

PatchBatch patchify_batch(const std::vector<std::vector<float>>& series, std::size_t patch_len) {
    if (series.empty()) throw ContractError("patchify_batch: empty batch");
    const std::size_t T = series.front().size();
    if (T < patch_len || patch_len < 1) throw ContractError("patchify_batch: series shorter than one patch");
    const std::size_t n = T / patch_len;
    std::vector<float> values;
    values.reserve(series.size() * n * patch_len);
    for (const auto& s : series) {
        if (s.size() != T) throw ContractError("patchify_batch: series lengths differ");
        values.insert(values.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(n * patch_len));
    }
    return {Tensor::from_data({series.size(), n, patch_len}, std::move(values)),
            std::vector<std::uint8_t>(series.size() * n, 0)};
}

Tensor embed_patches(const EncoderWeights& w, const Tensor& values) {
    if (values.rank() != 3) throw ShapeError("embed_patches: expected [B, N, P], got " + shape_str(values.shape()));
    const std::size_t n = values.dim(1);
    if (n > w.position.dim(0)) {
        throw ContractError("embed_patches: " + std::to_string(n) + " patches exceed positional table of " +
                            std::to_string(w.position.dim(0)));
    }
    return apply_linear(w.patch_embed, values) + ops::slice(w.position, 0, 0, n);
}

std::vector<std::uint8_t> attention_mask(std::size_t batch, std::size_t n_heads, std::size_t n, bool causal,
                                         std::span<const std::uint8_t> pad_mask) {
    bool any_pad = false;
    for (auto p : pad_mask) any_pad = any_pad || p;
    if (!any_pad) {
        std::vector<std::uint8_t> m(n * n, 0);
        if (causal)
            for (std::size_t q = 0; q < n; ++q)
                for (std::size_t k = q + 1; k < n; ++k) m[q * n + k] = 1;
        return m;
    }
    std::vector<std::uint8_t> m(batch * n_heads * n * n, 0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < n_heads; ++h)
            for (std::size_t q = 0; q < n; ++q)
                for (std::size_t k = 0; k < n; ++k) {
                    bool blocked = (causal && k > q) || pad_mask[b * n + k];
                    // Padded queries attend only to themselves so their rows stay finite.
                    if (pad_mask[b * n + q]) blocked = k != q;
                    m[((b * n_heads + h) * n + q) * n + k] = blocked ? 1 : 0;
                }
    return m;
}

namespace {

Tensor maybe_dropout(const Tensor& x, float p, const EncodeOptions& opts) {
    if (!opts.training || p <= 0.0f) return x;
    if (!opts.rng) throw ContractError("encode: dropout in training mode requires an rng");
    return ops::dropout(x, p, *opts.rng);
}

}  // namespace

Tensor transformer_layer(const Tensor& x, const TransformerLayerWeights& layer, std::size_t n_heads,
                         std::span<const std::uint8_t> mask, float dropout, const EncodeOptions& opts) {
    const std::size_t B = x.dim(0);
    const std::size_t N = x.dim(1);
    const std::size_t D = x.dim(2);
    const std::size_t dh = D / n_heads;

    Tensor h = apply_norm(layer.attn_norm, x);
    auto heads = [&](const Linear& proj) {
        // [B, N, D] -> [B, H, N, dh]
        return ops::transpose(ops::reshape(apply_linear(proj, h), {B, N, n_heads, dh}), 1, 2);
    };
    Tensor q = heads(layer.query);
    Tensor k = heads(layer.key);
    Tensor v = heads(layer.value);
    Tensor scores = ops::matmul(q, ops::transpose(k, 2, 3)) * (1.0f / std::sqrt(static_cast<float>(dh)));
    scores = ops::masked_fill(scores, mask, -1e9f);
    Tensor attn = maybe_dropout(ops::softmax(scores), dropout, opts);
    Tensor ctx = ops::reshape(ops::transpose(ops::matmul(attn, v), 1, 2), {B, N, D});
    Tensor y = x + maybe_dropout(apply_linear(layer.out, ctx), dropout, opts);

    Tensor f = apply_linear(layer.ffn_out, ops::gelu(apply_linear(layer.ffn_in, apply_norm(layer.ffn_norm, y))));
    return y + maybe_dropout(f, dropout, opts);
}

Tensor encode_embedded(const Tensor& tokens, const EncoderWeights& w, const BackboneConfig& cfg,
                       std::span<const std::uint8_t> pad_mask, const EncodeOptions& opts) {
    if (tokens.rank() != 3 || tokens.dim(2) != cfg.d_model)
        throw ShapeError("encode: tokens " + shape_str(tokens.shape()) + " do not match d_model " +
                         std::to_string(cfg.d_model));
    const std::size_t B = tokens.dim(0);
    const std::size_t N = tokens.dim(1);
    if (!pad_mask.empty() && pad_mask.size() != B * N) throw ShapeError("encode: pad mask size mismatch");
    const auto mask = attention_mask(B, cfg.n_heads, N, cfg.causal, pad_mask);
    Tensor x = tokens;
    for (std::size_t i = 0; i < w.layers.size(); ++i) {
        x = transformer_layer(x, w.layers[i], cfg.n_heads, mask, cfg.dropout, opts);
        if (!all_finite(x.data())) throw NumericError("encode: non-finite activation after layer " + std::to_string(i));
    }
    return apply_norm(w.final_norm, x);
}

Tensor encode(const PatchBatch& patches, const EncoderWeights& w, const BackboneConfig& cfg, const EncodeOptions& opts) {
    if (patches.values.rank() != 3 || patches.patch_len() != cfg.patch_len)
        throw ShapeError("encode: patches " + shape_str(patches.values.shape()) + " do not match patch_len " +
                         std::to_string(cfg.patch_len));
    return encode_embedded(embed_patches(w, patches.values), w, cfg, patches.pad_mask, opts);
}

void ema_update(const NamedTensors& teacher, const NamedTensors& student, float momentum) {
    if (!(momentum >= 0.0f && momentum <= 1.0f)) throw ContractError("ema_update: momentum must be in [0, 1]");
    if (teacher.size() != student.size()) throw ContractError("ema_update: parameter count mismatch");
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        if (teacher[i].second.shape() != student[i].second.shape())
            throw ContractError("ema_update: shape mismatch at " + teacher[i].first);
    }
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        Tensor t = teacher[i].second;
        auto dst = t.mutable_data();
        const auto src = student[i].second.data();
        if (momentum == 1.0f) continue;
        if (momentum == 0.0f) {
            std::copy(src.begin(), src.end(), dst.begin());
            continue;
        }
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = momentum * dst[j] + (1.0f - momentum) * src[j];
    }
}

void ema_update(const EncoderWeights& teacher, const EncoderWeights& student, float momentum) {
    ema_update(teacher.named_parameters(), student.named_parameters(), momentum);
}

std::uint64_t weights_digest(const NamedTensors& params) {
    std::uint64_t h = fnv1a64("");
    for (const auto& [name, t] : params) {
        h = fnv1a64(name, h);
        h = fnv1a64(tsb_bytes(t), h);
    }
    return h;
}

namespace {

constexpr char kCheckpointMagic[4] = {'T', 'S', 'C', 'K'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("checkpoint: truncated");
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

std::string header_text(const BackboneCheckpoint& c) {
    std::ostringstream os;
    os << "objective=" << c.objective << '\n'
       << "data_source=" << c.data_source << '\n'
       << "seed=" << c.seed << '\n'
       << "epoch=" << c.epoch << '\n'
       << "patch_len=" << c.config.patch_len << '\n'
       << "d_model=" << c.config.d_model << '\n'
       << "n_heads=" << c.config.n_heads << '\n'
       << "n_layers=" << c.config.n_layers << '\n'
       << "n_predictor_layers=" << c.config.n_predictor_layers << '\n'
       << "ffn_ratio=" << c.config.ffn_ratio << '\n'
       << "max_patches=" << c.config.max_patches << '\n'
       << "causal=" << (c.config.causal ? 1 : 0) << '\n'
       << "dropout=" << c.config.dropout << '\n';
    return os.str();
}

void write_checkpoint(std::ostream& os, const BackboneCheckpoint& c) {
    os.write(kCheckpointMagic, 4);
    put_u32(os, kCheckpointFormatVersion);
    const std::string header = header_text(c);
    put_u32(os, static_cast<std::uint32_t>(header.size()));
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    const auto params = c.weights.named_parameters();
    put_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tsb(os, t);
    }
}

}  // namespace

std::string checkpoint_bytes(const BackboneCheckpoint& ckpt) {
    std::ostringstream os(std::ios::binary);
    write_checkpoint(os, ckpt);
    return os.str();
}

void save_checkpoint(const std::filesystem::path& path, const BackboneCheckpoint& ckpt) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write checkpoint " + tmp);
        write_checkpoint(os, ckpt);
        if (!os) throw IoError("checkpoint write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

BackboneCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw IoError("checkpoint: bad magic in " + path.string());
    const std::uint32_t version = get_u32(is);
    if (version != kCheckpointFormatVersion) {
        throw IoError("checkpoint: format version " + std::to_string(version) + " not supported (expected " +
                      std::to_string(kCheckpointFormatVersion) + ")");
    }
    std::string header(get_u32(is), '\0');
    if (!is.read(header.data(), static_cast<std::streamsize>(header.size()))) throw IoError("checkpoint: truncated header");
    std::map<std::string, std::string> kv;
    std::istringstream hs(header);
    for (std::string line; std::getline(hs, line);) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const char* key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw IoError(std::string("checkpoint: header missing ") + key);
        return it->second;
    };
    BackboneCheckpoint c;
    c.objective = get("objective");
    c.data_source = get("data_source");
    c.seed = std::stoull(get("seed"));
    c.epoch = static_cast<std::uint32_t>(std::stoul(get("epoch")));
    c.config.patch_len = std::stoul(get("patch_len"));
    c.config.d_model = std::stoul(get("d_model"));
    c.config.n_heads = std::stoul(get("n_heads"));
    c.config.n_layers = std::stoul(get("n_layers"));
    c.config.n_predictor_layers = std::stoul(get("n_predictor_layers"));
    c.config.ffn_ratio = std::stoul(get("ffn_ratio"));
    c.config.max_patches = std::stoul(get("max_patches"));
    c.config.causal = get("causal") == "1";
    c.config.dropout = std::stof(get("dropout"));
    c.config.validate();

    std::mt19937_64 rng(0);
    c.weights = init_encoder(c.config, rng);
    const auto params = c.weights.named_parameters();
    const std::uint32_t count = get_u32(is);
    if (count != params.size()) throw IoError("checkpoint: tensor count does not match config");
    for (const auto& [expected_name, target] : params) {
        std::string name(get_u32(is), '\0');
        if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw IoError("checkpoint: truncated name");
        if (name != expected_name) throw IoError("checkpoint: expected tensor " + expected_name + ", found " + name);
        Tensor loaded = read_tsb(is);
        if (loaded.shape() != target.shape()) throw IoError("checkpoint: shape mismatch for " + name);
        Tensor dst = target;
        std::copy(loaded.data().begin(), loaded.data().end(), dst.mutable_data().begin());
    }
    return c;
}

BackboneCheckpoint random_checkpoint(const BackboneConfig& cfg, std::uint64_t seed) {
    BackboneCheckpoint c;
    c.config = cfg;
    auto rng = make_rng(seed, 0x5eed);
    c.weights = init_encoder(cfg, rng);
    c.seed = seed;
    return c;
}

}  // namespace tsrep
