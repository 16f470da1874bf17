#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "taskbias/ops.hpp"
#include "taskbias/serialize.hpp"
#include "taskbias/tokenizer.hpp"

namespace taskbias {

// ----------------------------- configuration -----------------------------

struct BackboneConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t embed_width = 64;
    std::size_t depth = 3;
    std::size_t heads = 4;
    std::size_t shared_dim = 64;
    std::size_t vocab_size = kVocabSize;
    std::size_t max_text_len = 48;
    double logit_scale_init = 1.0 / 0.07;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t patches() const { return grid() * grid(); }
    std::size_t patch_dim() const { return patch_size * patch_size * 3; }
    std::size_t mlp_dim() const { return 4 * embed_width; }

    void validate() const {
        if (image_size == 0 || patch_size == 0 || embed_width == 0 || depth == 0 || heads == 0 || shared_dim == 0 ||
            vocab_size == 0 || max_text_len < 2)
            throw DataError("backbone config fields must be positive");
        if (image_size % patch_size != 0) throw DataError("image_size must be divisible by patch_size");
        if (embed_width % heads != 0) throw DataError("embed_width must be divisible by heads");
        if (logit_scale_init <= 0) throw DataError("logit_scale_init must be positive");
    }

    std::map<std::string, std::string> to_meta() const {
        std::map<std::string, std::string> m;
        m["image_size"] = std::to_string(image_size);
        m["patch_size"] = std::to_string(patch_size);
        m["embed_width"] = std::to_string(embed_width);
        m["depth"] = std::to_string(depth);
        m["heads"] = std::to_string(heads);
        m["shared_dim"] = std::to_string(shared_dim);
        m["vocab_size"] = std::to_string(vocab_size);
        m["max_text_len"] = std::to_string(max_text_len);
        std::ostringstream ls;
        ls.precision(17);
        ls << logit_scale_init;
        m["logit_scale_init"] = ls.str();
        return m;
    }

    static BackboneConfig from_meta(const std::map<std::string, std::string>& m) {
        BackboneConfig c;
        auto need = [&](const std::string& k) {
            auto it = m.find(k);
            if (it == m.end()) throw DataError("checkpoint meta missing field '" + k + "'");
            return it->second;
        };
        c.image_size = std::stoull(need("image_size"));
        c.patch_size = std::stoull(need("patch_size"));
        c.embed_width = std::stoull(need("embed_width"));
        c.depth = std::stoull(need("depth"));
        c.heads = std::stoull(need("heads"));
        c.shared_dim = std::stoull(need("shared_dim"));
        c.vocab_size = std::stoull(need("vocab_size"));
        c.max_text_len = std::stoull(need("max_text_len"));
        c.logit_scale_init = std::stod(need("logit_scale_init"));
        c.validate();
        return c;
    }
};

// ----------------------------- weights -----------------------------

struct LayerWeights {
    Tensor ln1_g, ln1_b;
    Tensor qkv_w, qkv_b;    // [w, 3w], [3w]
    Tensor proj_w, proj_b;  // [w, w], [w]
    Tensor ln2_g, ln2_b;
    Tensor fc1_w, fc1_b;    // [w, 4w], [4w]
    Tensor fc2_w, fc2_b;    // [4w, w], [w]
};

struct TowerWeights {
    std::vector<LayerWeights> layers;
    Tensor ln_f_g, ln_f_b;
    Tensor proj;  // [w, d]
};

// All parameters of the dual encoder plus the log of the logit scale.
struct BackboneWeights {
    BackboneConfig config;
    Tensor patch_embed_w, patch_embed_b;  // [patch_dim, w], [w]
    Tensor cls_token;                     // [1, w]
    Tensor pos_vision;                    // [1+P, w]
    Tensor token_embed;                   // [vocab, w]
    Tensor pos_text;                      // [max_text_len, w]
    TowerWeights vision, text;
    Tensor log_logit_scale;  // [1]
    bool frozen = false;

    static BackboneWeights init(const BackboneConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        BackboneWeights w;
        w.config = cfg;
        Rng root(mix_seed(seed, fnv1a64("backbone-init")));
        auto randn = [&](Shape shape, const char* name, double stddev) {
            Rng r = root.fork(fnv1a64(name));
            return Tensor::randn(std::move(shape), r, stddev, true);
        };
        const std::size_t width = cfg.embed_width;
        w.patch_embed_w = randn({cfg.patch_dim(), width}, "patch_embed.weight", 0.02);
        w.patch_embed_b = Tensor::zeros({width}, true);
        w.cls_token = randn({1, width}, "cls_token", 0.02);
        w.pos_vision = randn({1 + cfg.patches(), width}, "pos.vision", 0.01);
        w.token_embed = randn({cfg.vocab_size, width}, "token_embed", 0.02);
        w.pos_text = randn({cfg.max_text_len, width}, "pos.text", 0.01);
        auto make_tower = [&](const char* tower) {
            TowerWeights tw;
            for (std::size_t l = 0; l < cfg.depth; ++l) {
                const std::string base = std::string(tower) + ".layer" + std::to_string(l) + ".";
                LayerWeights lw;
                lw.ln1_g = Tensor::filled({width}, 1.0, true);
                lw.ln1_b = Tensor::zeros({width}, true);
                lw.qkv_w = randn({width, 3 * width}, (base + "qkv.weight").c_str(), 0.02);
                lw.qkv_b = Tensor::zeros({3 * width}, true);
                lw.proj_w = randn({width, width}, (base + "proj.weight").c_str(), 0.02);
                lw.proj_b = Tensor::zeros({width}, true);
                lw.ln2_g = Tensor::filled({width}, 1.0, true);
                lw.ln2_b = Tensor::zeros({width}, true);
                lw.fc1_w = randn({width, cfg.mlp_dim()}, (base + "fc1.weight").c_str(), 0.02);
                lw.fc1_b = Tensor::zeros({cfg.mlp_dim()}, true);
                lw.fc2_w = randn({cfg.mlp_dim(), width}, (base + "fc2.weight").c_str(), 0.02);
                lw.fc2_b = Tensor::zeros({width}, true);
                tw.layers.push_back(std::move(lw));
            }
            tw.ln_f_g = Tensor::filled({width}, 1.0, true);
            tw.ln_f_b = Tensor::zeros({width}, true);
            tw.proj = randn({width, cfg.shared_dim}, (std::string(tower) + ".proj").c_str(),
                            1.0 / std::sqrt(static_cast<double>(width)));
            return tw;
        };
        w.vision = make_tower("vision");
        w.text = make_tower("text");
        w.log_logit_scale = Tensor::filled({1}, std::log(cfg.logit_scale_init), true);
        return w;
    }

    std::vector<std::pair<std::string, Tensor>> named_params() {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("patch_embed.weight", patch_embed_w);
        out.emplace_back("patch_embed.bias", patch_embed_b);
        out.emplace_back("cls_token", cls_token);
        out.emplace_back("pos.vision", pos_vision);
        out.emplace_back("token_embed", token_embed);
        out.emplace_back("pos.text", pos_text);
        auto tower = [&](const char* name, TowerWeights& tw) {
            for (std::size_t l = 0; l < tw.layers.size(); ++l) {
                const std::string base = std::string(name) + ".layer" + std::to_string(l) + ".";
                LayerWeights& lw = tw.layers[l];
                out.emplace_back(base + "ln1.gamma", lw.ln1_g);
                out.emplace_back(base + "ln1.beta", lw.ln1_b);
                out.emplace_back(base + "qkv.weight", lw.qkv_w);
                out.emplace_back(base + "qkv.bias", lw.qkv_b);
                out.emplace_back(base + "proj.weight", lw.proj_w);
                out.emplace_back(base + "proj.bias", lw.proj_b);
                out.emplace_back(base + "ln2.gamma", lw.ln2_g);
                out.emplace_back(base + "ln2.beta", lw.ln2_b);
                out.emplace_back(base + "fc1.weight", lw.fc1_w);
                out.emplace_back(base + "fc1.bias", lw.fc1_b);
                out.emplace_back(base + "fc2.weight", lw.fc2_w);
                out.emplace_back(base + "fc2.bias", lw.fc2_b);
            }
            out.emplace_back(std::string(name) + ".ln_f.gamma", tw.ln_f_g);
            out.emplace_back(std::string(name) + ".ln_f.beta", tw.ln_f_b);
            out.emplace_back(std::string(name) + ".proj", tw.proj);
        };
        tower("vision", vision);
        tower("text", text);
        out.emplace_back("logit_scale.log", log_logit_scale);
        return out;
    }

    std::vector<Tensor> params() {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_params()) out.push_back(t);
        return out;
    }

    // Frozen weights never record gradients; adam must not touch them.
    void set_frozen(bool f) {
        frozen = f;
        for (auto& [name, t] : named_params()) t.set_requires_grad(!f);
        if (f)
            for (auto& [name, t] : named_params()) t.node()->tracked = false;
    }

    double logit_scale() const { return std::exp(log_logit_scale.ptr()[0]); }

    // CLIP-style cap on the scale, applied outside the tape after each step
    void clamp_logit_scale(double max_scale = 100.0) {
        const double cap = std::log(max_scale);
        if (log_logit_scale.ptr()[0] > cap) log_logit_scale.ptr()[0] = cap;
    }
};

// ----------------------------- checkpoint io -----------------------------

inline TensorFile to_tensor_file(BackboneWeights& w) {
    TensorFile file;
    file.meta = w.config.to_meta();
    file.meta["kind"] = "backbone";
    for (auto& [name, t] : w.named_params()) file.tensors.emplace_back(name, t);
    return file;
}

inline void save_checkpoint(const std::string& path, BackboneWeights& w) { write_tensor_file(path, to_tensor_file(w)); }

inline std::string checkpoint_hash(BackboneWeights& w) {
    const std::string buf = serialize_tensor_file(to_tensor_file(w));
    std::ostringstream h;
    h << std::hex << fnv1a64(buf.data(), buf.size());
    return h.str();
}

// Weights reconstructed bit-identically from a checkpoint; loaded frozen.
inline BackboneWeights load_checkpoint(const std::string& path) {
    if (!std::filesystem::exists(std::filesystem::path(path)))
        throw DataError("checkpoint not found: '" + path + "'");
    TensorFile file = read_tensor_file(path);
    auto kind = file.meta.find("kind");
    if (kind == file.meta.end() || kind->second != "backbone")
        throw DataError("tensor file at '" + path + "' is not a backbone checkpoint");
    const BackboneConfig cfg = BackboneConfig::from_meta(file.meta);
    BackboneWeights w = BackboneWeights::init(cfg, 0);
    for (auto& [name, t] : w.named_params()) {
        const Tensor* loaded = file.find(name);
        if (!loaded) throw DataError("checkpoint name table is missing tensor '" + name + "'");
        if (loaded->shape() != t.shape())
            throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(loaded->shape()) +
                            ", expected " + shape_str(t.shape()));
        std::memcpy(t.ptr(), loaded->ptr(), t.size() * sizeof(double));
    }
    if (file.tensors.size() != w.named_params().size())
        throw DataError("checkpoint name table lists unexpected extra tensors");
    w.set_frozen(true);
    return w;
}

// ----------------------------- forward passes -----------------------------

struct SequenceLayout {
    std::size_t cls_index = 0;
    std::size_t prompt_count = 0;
    std::size_t patch_start = 1;
    std::size_t patch_count = 0;
    std::size_t length = 0;
};

// Per-layer, per-head attention matrices from one vision forward pass.
struct AttentionRecord {
    SequenceLayout layout;
    std::size_t heads = 0;
    std::size_t tokens = 0;
    std::vector<std::vector<double>> layers;  // each flat [heads, tokens, tokens]

    double at(std::size_t layer, std::size_t head, std::size_t row, std::size_t col) const {
        return layers[layer][(head * tokens + row) * tokens + col];
    }
};

// pointers into prompt parameters; at most one variant active
struct VisualPrompt {
    const Tensor* pixel = nullptr;
    std::size_t border = 0;
    const Tensor* tokens = nullptr;

    std::size_t token_count() const { return tokens ? tokens->dim(0) : 0; }
};

namespace detail_bb {

// shared pre-LN encoder; x is [B*T, w]
inline Tensor encoder_forward(const TowerWeights& tw, Tensor x, std::size_t batch, std::size_t tokens,
                              std::size_t heads, const std::vector<std::size_t>& valid_lens,
                              std::vector<AttentionRecord>* records) {
    const std::size_t width = x.dim(1), dh = width / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const LayerWeights& lw : tw.layers) {
        Tensor n1 = ops::layer_norm(x, lw.ln1_g, lw.ln1_b);
        Tensor qkv = ops::add_rowwise(ops::matmul(n1, lw.qkv_w), lw.qkv_b);
        Tensor q = ops::split_heads(ops::slice_cols(qkv, 0, width), batch, tokens, heads);
        Tensor k = ops::split_heads(ops::slice_cols(qkv, width, 2 * width), batch, tokens, heads);
        Tensor v = ops::split_heads(ops::slice_cols(qkv, 2 * width, 3 * width), batch, tokens, heads);
        Tensor probs = ops::attention_probs(q, k, scale, valid_lens, heads);
        if (records) {
            for (std::size_t b = 0; b < batch; ++b) {
                auto& rec = (*records)[b];
                std::vector<double> layer(heads * tokens * tokens);
                std::memcpy(layer.data(), probs.ptr() + b * heads * tokens * tokens, layer.size() * sizeof(double));
                rec.layers.push_back(std::move(layer));
            }
        }
        Tensor ctx = ops::merge_heads(ops::attention_apply(probs, v), batch, tokens, heads);
        Tensor attn_out = ops::add_rowwise(ops::matmul(ctx, lw.proj_w), lw.proj_b);
        x = ops::add(x, attn_out);
        Tensor n2 = ops::layer_norm(x, lw.ln2_g, lw.ln2_b);
        Tensor h = ops::add_rowwise(ops::matmul(n2, lw.fc1_w), lw.fc1_b);
        Tensor mlp_out = ops::add_rowwise(ops::matmul(ops::gelu(h), lw.fc2_w), lw.fc2_b);
        x = ops::add(x, mlp_out);
    }
    return ops::layer_norm(x, tw.ln_f_g, tw.ln_f_b);
}

}  // namespace detail_bb

// images: flat [B, S, S, 3] tensor in [0,1]. Returns unit-norm rows [B, d].
inline Tensor encode_images_batch(BackboneWeights& w, const Tensor& images, const VisualPrompt* prompt = nullptr,
                                  std::vector<AttentionRecord>* records = nullptr) {
    const BackboneConfig& cfg = w.config;
    const std::size_t px = cfg.image_size * cfg.image_size * 3;
    if (images.size() % px != 0) throw DataError("encode_images_batch: image dimensions do not match config");
    const std::size_t batch = images.size() / px;
    const std::size_t p = cfg.patches(), width = cfg.embed_width;
    const std::size_t m = prompt && prompt->tokens ? prompt->token_count() : 0;
    const std::size_t j = 1 + m + p;

    Tensor pixels = images;
    if (prompt && prompt->pixel) pixels = ops::add_border_clamped(images, *prompt->pixel, cfg.image_size, prompt->border);

    Tensor patch_rows = ops::extract_patches(pixels, cfg.image_size, cfg.patch_size);
    Tensor embedded = ops::add_rowwise(ops::matmul(patch_rows, w.patch_embed_w), w.patch_embed_b);

    Tensor head_block = w.cls_token;
    if (m > 0) head_block = ops::concat_rows({w.cls_token, *prompt->tokens});
    Tensor seq = ops::concat_per_example(ops::tile_rows(head_block, batch), embedded, 1 + m, p);

    // prompt slots carry their own learned positional component inside phi
    Tensor pos_full = w.pos_vision;
    if (m > 0)
        pos_full = ops::concat_rows(
            {ops::slice_rows(w.pos_vision, 0, 1), Tensor::zeros({m, width}), ops::slice_rows(w.pos_vision, 1, 1 + p)});
    seq = ops::add_positional(seq, pos_full, batch);

    if (records) {
        records->assign(batch, AttentionRecord{});
        for (auto& rec : *records) {
            rec.layout = SequenceLayout{0, m, 1 + m, p, j};
            rec.heads = cfg.heads;
            rec.tokens = j;
        }
    }
    Tensor x = detail_bb::encoder_forward(w.vision, seq, batch, j, cfg.heads, {}, records);
    std::vector<std::size_t> cls_rows(batch);
    for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * j;
    return ops::l2_normalize_rows(ops::matmul(ops::gather_rows(x, std::move(cls_rows)), w.vision.proj));
}

// token sequences -> unit-norm rows [B, d]; pooled at each sequence's EOS
inline Tensor encode_texts_batch(BackboneWeights& w, std::span<const TokenSequence> seqs) {
    const BackboneConfig& cfg = w.config;
    if (seqs.empty()) throw DataError("encode_texts_batch: empty batch");
    std::size_t l = 2;
    for (const TokenSequence& s : seqs) {
        if (s.ids.size() != cfg.max_text_len) throw DataError("token sequence length does not match config");
        l = std::max(l, s.true_len);
    }
    const std::size_t batch = seqs.size();
    std::vector<std::size_t> flat_ids(batch * l);
    std::vector<std::size_t> lens(batch);
    std::vector<std::size_t> eos_rows(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < l; ++i) {
            const int id = seqs[b].ids[i];
            if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
                throw DataError("token id out of vocabulary range");
            flat_ids[b * l + i] = static_cast<std::size_t>(id);
        }
        lens[b] = seqs[b].true_len;
        eos_rows[b] = b * l + seqs[b].true_len - 1;
    }
    Tensor rows = ops::gather_rows(w.token_embed, std::move(flat_ids));
    rows = ops::add_positional(rows, ops::slice_rows(w.pos_text, 0, l), batch);
    Tensor x = detail_bb::encoder_forward(w.text, rows, batch, l, cfg.heads, lens, nullptr);
    return ops::l2_normalize_rows(ops::matmul(ops::gather_rows(x, std::move(eos_rows)), w.text.proj));
}

// ----------------------------- single-item api -----------------------------

using Embedding = std::vector<double>;

struct ImageEncodeResult {
    Embedding embedding;
    AttentionRecord attention;
};

inline Tensor image_to_tensor(std::span<const double> pixels, const BackboneConfig& cfg) {
    if (pixels.size() != cfg.image_size * cfg.image_size * 3)
        throw DataError("image has " + std::to_string(pixels.size()) + " values, config wants " +
                        std::to_string(cfg.image_size * cfg.image_size * 3));
    return Tensor::from_data({1, cfg.image_size, cfg.image_size, 3}, std::vector<double>(pixels.begin(), pixels.end()));
}

inline ImageEncodeResult encode_image(BackboneWeights& w, std::span<const double> pixels,
                                      const VisualPrompt* prompt = nullptr) {
    std::vector<AttentionRecord> records;
    Tensor emb = encode_images_batch(w, image_to_tensor(pixels, w.config), prompt, &records);
    ImageEncodeResult out;
    out.embedding.assign(emb.ptr(), emb.ptr() + emb.size());
    out.attention = std::move(records[0]);
    return out;
}

inline Embedding encode_text(BackboneWeights& w, const std::string& s) {
    const TokenSequence seq = tokenize_text(s, w.config.max_text_len);
    Tensor emb = encode_texts_batch(w, std::span<const TokenSequence>(&seq, 1));
    return Embedding(emb.ptr(), emb.ptr() + emb.size());
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DataError("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

// scaled cosine similarity of two unit vectors
inline double similarity(std::span<const double> e_img, std::span<const double> e_txt, double logit_scale) {
    return logit_scale * dot(e_img, e_txt);
}

}  // namespace taskbias
