#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskbias/adam.hpp"
#include "taskbias/probe.hpp"

namespace taskbias {

// ----------------------------- prompt parameters -----------------------------

enum class PromptVariant { pixel_border, visual_token };

inline std::string to_string(PromptVariant v) {
    return v == PromptVariant::pixel_border ? "pixel_border" : "visual_token";
}

inline PromptVariant prompt_variant_from_string(const std::string& s) {
    if (s == "pixel_border") return PromptVariant::pixel_border;
    if (s == "visual_token") return PromptVariant::visual_token;
    throw DataError("unknown prompt variant '" + s + "'");
}

// Image-independent learned prompt: either additive pixel values on a border
// of width PS, or m visual tokens inserted after [CLS].
struct PromptParams {
    PromptVariant variant = PromptVariant::visual_token;
    std::size_t border = 0;       // PS, pixel_border only
    Tensor values;                // [n_border, 3] or [m, embed_width]
    std::string backbone_hash;    // hash of the weights the prompt was tuned on

    static PromptParams pixel(std::size_t ps, const BackboneConfig& cfg) {
        if (ps >= cfg.image_size / 2) throw DataError("border width must stay below half the image size");
        PromptParams p;
        p.variant = PromptVariant::pixel_border;
        p.border = ps;
        p.values = Tensor::zeros({ops::border_positions(cfg.image_size, ps).size(), 3}, true);
        return p;
    }

    static PromptParams token(std::size_t m, const BackboneConfig& cfg, std::uint64_t seed) {
        PromptParams p;
        p.variant = PromptVariant::visual_token;
        Rng rng(mix_seed(seed, fnv1a64("visual-token-prompt")));
        p.values = Tensor::randn({m, cfg.embed_width}, rng, 0.02, true);
        return p;
    }

    VisualPrompt view() const {
        VisualPrompt v;
        if (variant == PromptVariant::pixel_border) {
            v.pixel = &values;
            v.border = border;
        } else {
            v.tokens = &values;
        }
        return v;
    }

    std::uint64_t content_hash() const {
        return fnv1a64(values.ptr(), values.size() * sizeof(double));
    }
};

// ----------------------------- appliers -----------------------------

// Single-image pixel prompt application; interior pixels stay bit-identical.
inline std::vector<double> apply_pixel_prompt(std::span<const double> image, const PromptParams& phi,
                                              std::size_t image_size) {
    if (phi.variant != PromptVariant::pixel_border) throw DataError("apply_pixel_prompt needs a pixel_border prompt");
    Tensor img = Tensor::from_data({1, image_size, image_size, 3}, std::vector<double>(image.begin(), image.end()));
    Tensor out = ops::add_border_clamped(img, phi.values, image_size, phi.border);
    return std::vector<double>(out.ptr(), out.ptr() + out.size());
}

// [CLS, patches] -> [CLS, prompt tokens, patches]
inline Tensor apply_token_prompt(const Tensor& tokens_with_cls, const PromptParams& phi) {
    if (phi.variant != PromptVariant::visual_token) throw DataError("apply_token_prompt needs a visual_token prompt");
    if (tokens_with_cls.ndim() != 2 || tokens_with_cls.dim(0) < 1)
        throw DataError("token sequence must be a non-empty [S, width] matrix");
    if (phi.values.dim(0) == 0) return tokens_with_cls;
    return ops::concat_rows({ops::slice_rows(tokens_with_cls, 0, 1), phi.values,
                             ops::slice_rows(tokens_with_cls, 1, tokens_with_cls.dim(0))});
}

// ----------------------------- objective -----------------------------

// Cross-entropy of the scaled similarities between the prompted image and the
// per-instance label set, targeting task k. Gradients reach phi only when
// theta is frozen.
inline Tensor prompt_loss_batch(BackboneWeights& w, const Tensor& images, const Tensor& option_embs,
                                std::size_t n_options, std::vector<std::size_t> targets, const PromptParams& phi) {
    const std::size_t batch = targets.size();
    if (n_options < 2) throw DataError("prompt loss needs at least 2 labels per example");
    if (option_embs.dim(0) != batch * n_options) throw DataError("option embedding count mismatch");
    for (std::size_t t : targets)
        if (t >= n_options) throw DataError("target task index out of range");
    VisualPrompt view = phi.view();
    Tensor img_embs = encode_images_batch(w, images, &view);
    Tensor logits = ops::mul_scalar(ops::block_dot(img_embs, option_embs, n_options), w.logit_scale());
    return ops::cross_entropy_rows(logits, std::move(targets));
}

// single-example surface: labels are this image's correct answers, one per task
inline Tensor prompt_loss(BackboneWeights& w, std::span<const double> image, std::span<const std::string> labels,
                          std::size_t target_k, const PromptParams& phi) {
    if (labels.size() < 2) throw DataError("prompt loss needs at least 2 labels");
    if (target_k >= labels.size()) throw DataError("target task index out of range");
    std::vector<double> opt_data;
    for (const std::string& label : labels) {
        const Embedding e = encode_text(w, uniform_prefixed(label));
        opt_data.insert(opt_data.end(), e.begin(), e.end());
    }
    Tensor option_embs = Tensor::from_data({labels.size(), w.config.shared_dim}, std::move(opt_data));
    return prompt_loss_batch(w, image_to_tensor(image, w.config), option_embs, labels.size(), {target_k}, phi);
}

// ----------------------------- tuning -----------------------------

struct TuneConfig {
    TaskId target = TaskId::object;
    PromptVariant variant = PromptVariant::visual_token;
    std::size_t border = 1;        // PS for pixel_border
    std::size_t token_count = 1;   // m for visual_token
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    double lr = 1e-2;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw DataError("prompt tuning needs at least one epoch");
        if (batch_size < 1) throw DataError("batch size must be positive");
    }
};

struct TuneStepMetrics {
    std::size_t step = 0;
    double loss = 0.0;
};

struct TuneResult {
    PromptParams prompt;
    std::vector<TuneStepMetrics> metrics;
};

namespace detail_prompt {

// per-example option embeddings under the uniform prefix, computed once
inline Tensor pair_option_embeddings(BackboneWeights& w, const Manifest& manifest,
                                     std::span<const std::uint64_t> ids, const PairwiseDataset& ds,
                                     TextEmbeddingCache& cache) {
    std::vector<double> data;
    data.reserve(ids.size() * 2 * w.config.shared_dim);
    for (std::uint64_t id : ids) {
        const ManifestEntry& e = manifest.by_id(id);
        for (TaskId t : {ds.task_a, ds.task_b}) {
            const Embedding& emb = cache.get(uniform_prefixed(label_for(e.labels, t)));
            data.insert(data.end(), emb.begin(), emb.end());
        }
    }
    return Tensor::from_data({ids.size() * 2, w.config.shared_dim}, std::move(data));
}

}  // namespace detail_prompt

// Learn phi over the frozen backbone on the dataset's training split.
inline TuneResult tune_prompt(BackboneWeights& w, const Manifest& manifest, const PairwiseDataset& ds,
                              const TuneConfig& cfg, std::ostream* metrics_stream = nullptr) {
    cfg.validate();
    if (!w.frozen) throw DataError("prompt tuning requires a frozen backbone");
    if (cfg.target != ds.task_a && cfg.target != ds.task_b)
        throw DataError("target task is not part of the pairwise dataset");
    if (ds.train.empty()) throw DataError("pairwise dataset has an empty training split");

    TuneResult result;
    result.prompt = cfg.variant == PromptVariant::pixel_border ? PromptParams::pixel(cfg.border, w.config)
                                                               : PromptParams::token(cfg.token_count, w.config, cfg.seed);
    result.prompt.backbone_hash = checkpoint_hash(w);

    const std::size_t target_index = cfg.target == ds.task_a ? 0 : 1;
    TextEmbeddingCache cache(w);

    // image pixels and option embeddings for the whole split, loaded once
    LoadedCorpus corpus;
    corpus.image_size = w.config.image_size;
    std::vector<std::size_t> rows(ds.train.size());
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        const ManifestEntry& e = manifest.by_id(ds.train[i]);
        corpus.ids.push_back(e.id);
        corpus.pixels.push_back(load_entry_pixels(manifest, e, w.config.image_size));
        rows[i] = i;
    }
    Tensor all_options = detail_prompt::pair_option_embeddings(w, manifest, ds.train, ds, cache);

    std::vector<Tensor> params{result.prompt.values};
    AdamState adam;
    adam.lr = cfg.lr;
    Rng order_rng(mix_seed(cfg.seed, fnv1a64("prompt-order")));
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = rows;
        order_rng.shuffle(order);
        for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - at);
            auto chunk = std::span<const std::size_t>(order).subspan(at, n);
            // gather this batch's option rows in chunk order
            std::vector<std::size_t> opt_rows;
            opt_rows.reserve(2 * n);
            for (std::size_t r : chunk) {
                opt_rows.push_back(2 * r);
                opt_rows.push_back(2 * r + 1);
            }
            GradientTape tape;
            TapeScope scope(tape);
            Tensor batch_opts = ops::gather_rows(all_options, std::move(opt_rows));
            Tensor images = batch_image_tensor(corpus, chunk, w.config);
            Tensor loss = prompt_loss_batch(w, images, batch_opts, 2,
                                            std::vector<std::size_t>(n, target_index), result.prompt);
            if (!loss.all_finite())
                throw NumericError("non-finite prompt loss at step " + std::to_string(step));
            auto grads = tape.gradients(loss, params);
            adam_step(params, grads, adam);
            result.metrics.push_back({step, loss.item()});
            if (metrics_stream) {
                nlohmann::json j;
                j["step"] = step;
                j["loss"] = loss.item();
                (*metrics_stream) << j.dump() << "\n";
            }
            ++step;
        }
    }
    return result;
}

// ----------------------------- evaluation -----------------------------

// Table-style two-way evaluation: how often the prompted model selects the
// intended task's answer on the test split, uniform prefix on every option.
inline double eval_disambiguation(BackboneWeights& w, const Manifest& manifest, const PairwiseDataset& ds,
                                  TaskId direction, const PromptParams* phi = nullptr) {
    if (ds.test.empty()) throw DataError("pairwise dataset has an empty test split");
    if (direction != ds.task_a && direction != ds.task_b)
        throw DataError("direction is not part of the pairwise dataset");
    TextEmbeddingCache cache(w);
    const double scale = w.logit_scale();
    VisualPrompt view;
    if (phi) view = phi->view();
    std::size_t hits = 0;
    const TaskId other = direction == ds.task_a ? ds.task_b : ds.task_a;
    for (std::uint64_t id : ds.test) {
        const ManifestEntry& e = manifest.by_id(id);
        const std::vector<std::uint8_t> px = load_entry_pixels(manifest, e, w.config.image_size);
        std::vector<double> img(px.size());
        for (std::size_t i = 0; i < px.size(); ++i) img[i] = static_cast<double>(px[i]) / 255.0;
        const Embedding emb = encode_image(w, img, phi ? &view : nullptr).embedding;
        const double s_want = similarity(emb, cache.get(uniform_prefixed(label_for(e.labels, direction))), scale);
        const double s_other = similarity(emb, cache.get(uniform_prefixed(label_for(e.labels, other))), scale);
        // a tie goes to the dataset's first task, deterministically
        if (s_want == s_other) hits += direction == ds.task_a;
        else hits += s_want > s_other;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(ds.test.size());
}

// Zero-shot accuracy over the full category vocabulary (not two-way).
inline double eval_downstream(BackboneWeights& w, const Manifest& manifest, std::span<const std::uint64_t> ids,
                              std::span<const std::string> vocabulary, TaskId task,
                              const PromptParams* phi = nullptr) {
    if (vocabulary.empty()) throw DataError("downstream evaluation needs a non-empty vocabulary");
    if (ids.empty()) throw DataError("downstream evaluation needs a non-empty split");
    TextEmbeddingCache cache(w);
    const double scale = w.logit_scale();
    VisualPrompt view;
    if (phi) view = phi->view();
    std::size_t hits = 0;
    for (std::uint64_t id : ids) {
        const ManifestEntry& e = manifest.by_id(id);
        const std::vector<std::uint8_t> px = load_entry_pixels(manifest, e, w.config.image_size);
        std::vector<double> img(px.size());
        for (std::size_t i = 0; i < px.size(); ++i) img[i] = static_cast<double>(px[i]) / 255.0;
        const Embedding emb = encode_image(w, img, phi ? &view : nullptr).embedding;
        std::size_t best = 0;
        double best_sim = -1e300;
        for (std::size_t v = 0; v < vocabulary.size(); ++v) {
            const double s = similarity(emb, cache.get(uniform_prefixed(vocabulary[v])), scale);
            if (s > best_sim) {
                best_sim = s;
                best = v;
            }
        }
        hits += vocabulary[best] == label_for(e.labels, task);
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(ids.size());
}

// ----------------------------- prompt file io -----------------------------

inline void save_prompt(const std::string& path, const PromptParams& phi) {
    TensorFile file;
    file.meta["kind"] = "prompt";
    file.meta["variant"] = to_string(phi.variant);
    file.meta["border"] = std::to_string(phi.border);
    file.meta["tokens"] = std::to_string(phi.variant == PromptVariant::visual_token ? phi.values.dim(0) : 0);
    file.meta["backbone_hash"] = phi.backbone_hash;
    file.tensors.emplace_back("prompt.values", phi.values);
    write_tensor_file(path, file);
}

inline PromptParams load_prompt(const std::string& path) {
    if (!std::filesystem::exists(std::filesystem::path(path)))
        throw DataError("prompt file not found: '" + path + "'");
    TensorFile file = read_tensor_file(path);
    auto kind = file.meta.find("kind");
    if (kind == file.meta.end() || kind->second != "prompt")
        throw DataError("tensor file at '" + path + "' is not a prompt file");
    PromptParams phi;
    phi.variant = prompt_variant_from_string(file.meta.at("variant"));
    phi.border = std::stoull(file.meta.at("border"));
    phi.backbone_hash = file.meta.at("backbone_hash");
    const Tensor* values = file.find("prompt.values");
    if (!values) throw DataError("prompt file is missing tensor 'prompt.values'");
    phi.values = values->clone();
    phi.values.set_requires_grad(true);
    return phi;
}

}  // namespace taskbias
