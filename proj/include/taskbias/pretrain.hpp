#pragma once

#include <chrono>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskbias/adam.hpp"
#include "taskbias/backbone.hpp"
#include "taskbias/synth.hpp"

namespace taskbias {

// ----------------------------- objective -----------------------------

// Symmetric batch contrastive loss: mean of image->text and text->image
// cross-entropies over the scaled N x N similarity matrix, diagonal targets.
inline Tensor infonce_loss(const Tensor& img_embs, const Tensor& txt_embs, const Tensor& logit_scale) {
    if (img_embs.ndim() != 2 || img_embs.shape() != txt_embs.shape())
        throw DataError("infonce_loss: embedding matrices must have identical [N,d] shapes");
    const std::size_t n = img_embs.dim(0);
    if (n < 2) throw DataError("infonce_loss is degenerate for batches smaller than 2");
    Tensor sims = ops::scale_by(ops::matmul_nt(img_embs, txt_embs), logit_scale);
    std::vector<std::size_t> diag(n);
    for (std::size_t i = 0; i < n; ++i) diag[i] = i;
    Tensor i2t = ops::cross_entropy_rows(sims, diag);
    Tensor t2i = ops::cross_entropy_rows(ops::transpose(sims), std::move(diag));
    return ops::mul_scalar(ops::add(i2t, t2i), 0.5);
}

// ----------------------------- corpus in memory -----------------------------

struct LoadedCorpus {
    std::vector<std::uint64_t> ids;
    std::vector<std::vector<std::uint8_t>> pixels;  // 8-bit images
    std::vector<TokenSequence> tokens;              // tokenized captions
    std::vector<std::string> captions;
    std::vector<Labels> labels;
    std::size_t image_size = 32;

    std::size_t index_of(std::uint64_t id) const {
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == id) return i;
        throw DataError("corpus has no example with id " + std::to_string(id));
    }

    // caption strings that would be correct for this image under any task
    bool is_correct_answer(std::size_t row, const std::string& text) const {
        for (const std::string& label : labels[row])
            if (text == label || text == wrap_caption(label)) return true;
        return false;
    }
};

inline LoadedCorpus load_corpus(const Manifest& manifest, const BackboneConfig& cfg) {
    LoadedCorpus c;
    c.image_size = cfg.image_size;
    c.ids.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        c.ids.push_back(e.id);
        c.pixels.push_back(load_entry_pixels(manifest, e, cfg.image_size));
        c.tokens.push_back(tokenize_text(e.caption, cfg.max_text_len));
        c.captions.push_back(e.caption);
        c.labels.push_back(e.labels);
    }
    return c;
}

inline Tensor batch_image_tensor(const LoadedCorpus& corpus, std::span<const std::size_t> rows,
                                 const BackboneConfig& cfg) {
    const std::size_t px = cfg.image_size * cfg.image_size * 3;
    std::vector<double> data(rows.size() * px);
    for (std::size_t b = 0; b < rows.size(); ++b)
        for (std::size_t i = 0; i < px; ++i)
            data[b * px + i] = static_cast<double>(corpus.pixels[rows[b]][i]) / 255.0;
    return Tensor::from_data({rows.size(), cfg.image_size, cfg.image_size, 3}, std::move(data));
}

// ----------------------------- training -----------------------------

struct PretrainConfig {
    std::size_t batch_size = 32;
    std::size_t epochs = 30;
    double lr = 1e-3;
    std::size_t warmup_steps = 200;  // linear ramp; avoids early embedding collapse
    double lr_floor_frac = 0.1;      // cosine decay from peak to this fraction
    std::uint64_t seed = 0;
    double holdout_fraction = 0.1;
    std::string checkpoint_path;

    void validate() const {
        if (batch_size < 2) throw DataError("contrastive batches need at least 2 examples");
        if (epochs == 0) throw DataError("epochs must be positive");
        if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) throw DataError("holdout fraction must be in [0,1)");
    }
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double loss = 0.0;
    double holdout_top1 = 0.0;      // exact caption retrieval
    double holdout_top1_any = 0.0;  // any correct answer of the image retrieved
};

struct TrainResult {
    std::vector<EpochMetrics> metrics;
    std::string checkpoint_hash;
};

// mean contrastive loss over fixed batches, no gradients
inline double evaluate_mean_loss(BackboneWeights& w, const LoadedCorpus& corpus,
                                 std::span<const std::size_t> rows, std::size_t batch_size) {
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t at = 0; at + batch_size <= rows.size(); at += batch_size) {
        auto chunk = rows.subspan(at, batch_size);
        Tensor imgs = encode_images_batch(w, batch_image_tensor(corpus, chunk, w.config));
        std::vector<TokenSequence> seqs;
        for (std::size_t r : chunk) seqs.push_back(corpus.tokens[r]);
        Tensor txts = encode_texts_batch(w, seqs);
        Tensor scale = Tensor::scalar(w.logit_scale());
        total += infonce_loss(imgs, txts, scale).item();
        ++batches;
    }
    if (batches == 0) throw DataError("not enough examples for a single evaluation batch");
    return total / static_cast<double>(batches);
}

// Within-batch retrieval accuracy. `exact` credits a retrieval whose text
// equals the paired caption string (duplicate captions count). Multi-task
// captions name one of several equally correct answers, so `any_answer`
// additionally credits any retrieved text that is a correct answer for the
// image under some task.
struct RetrievalAccuracy {
    double exact = 0.0;
    double any_answer = 0.0;
};

inline RetrievalAccuracy batch_retrieval_top1(BackboneWeights& w, const LoadedCorpus& corpus,
                                              std::span<const std::size_t> rows, std::size_t batch_size) {
    std::size_t exact = 0, any = 0, total = 0;
    for (std::size_t at = 0; at + 2 <= rows.size(); at += batch_size) {
        const std::size_t n = std::min(batch_size, rows.size() - at);
        if (n < 2) break;
        auto chunk = rows.subspan(at, n);
        Tensor imgs = encode_images_batch(w, batch_image_tensor(corpus, chunk, w.config));
        std::vector<TokenSequence> seqs;
        for (std::size_t r : chunk) seqs.push_back(corpus.tokens[r]);
        Tensor txts = encode_texts_batch(w, seqs);
        Tensor sims = ops::matmul_nt(imgs, txts);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < n; ++j)
                if (sims.ptr()[i * n + j] > sims.ptr()[i * n + best]) best = j;
            exact += corpus.captions[chunk[best]] == corpus.captions[chunk[i]];
            any += corpus.is_correct_answer(chunk[i], corpus.captions[chunk[best]]);
            ++total;
        }
    }
    if (total == 0) return {};
    return {static_cast<double>(exact) / static_cast<double>(total),
            static_cast<double>(any) / static_cast<double>(total)};
}

struct CorpusSplit {
    std::vector<std::size_t> train_rows;
    std::vector<std::size_t> holdout_rows;
};

inline CorpusSplit split_corpus(std::size_t count, double holdout_fraction, std::uint64_t seed) {
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    Rng rng(mix_seed(seed, fnv1a64("pretrain-holdout")));
    rng.shuffle(order);
    const std::size_t n_holdout = static_cast<std::size_t>(std::floor(holdout_fraction * static_cast<double>(count) + 0.5));
    CorpusSplit split;
    split.holdout_rows.assign(order.begin(), order.begin() + static_cast<long>(n_holdout));
    split.train_rows.assign(order.begin() + static_cast<long>(n_holdout), order.end());
    return split;
}

inline TrainResult train_backbone(const Manifest& manifest, const BackboneConfig& cfg, const PretrainConfig& pcfg,
                                  std::ostream* metrics_stream = nullptr) {
    cfg.validate();
    pcfg.validate();
    if (manifest.entries.size() < pcfg.batch_size)
        throw DataError("manifest holds fewer examples than one contrastive batch");

    LoadedCorpus corpus = load_corpus(manifest, cfg);
    CorpusSplit split = split_corpus(corpus.ids.size(), pcfg.holdout_fraction, pcfg.seed);
    if (split.train_rows.size() < pcfg.batch_size) throw DataError("training split smaller than one batch");

    BackboneWeights w = BackboneWeights::init(cfg, pcfg.seed);
    std::vector<Tensor> params = w.params();
    AdamState adam;
    adam.lr = pcfg.lr;

    Rng order_rng(mix_seed(pcfg.seed, fnv1a64("pretrain-order")));
    TrainResult result;
    std::size_t global_step = 0;
    const std::size_t steps_per_epoch = split.train_rows.size() / pcfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * pcfg.epochs;
    auto lr_at = [&](std::size_t step) {
        if (pcfg.warmup_steps > 0 && step < pcfg.warmup_steps)
            return pcfg.lr * static_cast<double>(step + 1) / static_cast<double>(pcfg.warmup_steps);
        if (total_steps <= pcfg.warmup_steps) return pcfg.lr;
        const double progress = static_cast<double>(step - pcfg.warmup_steps) /
                                static_cast<double>(total_steps - pcfg.warmup_steps);
        const double cosine = 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
        return pcfg.lr * (pcfg.lr_floor_frac + (1.0 - pcfg.lr_floor_frac) * cosine);
    };
    for (std::size_t epoch = 0; epoch < pcfg.epochs; ++epoch) {
        std::vector<std::size_t> order = split.train_rows;
        order_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t at = 0; at + pcfg.batch_size <= order.size(); at += pcfg.batch_size) {
            auto chunk = std::span<const std::size_t>(order).subspan(at, pcfg.batch_size);
            GradientTape tape;
            TapeScope scope(tape);
            Tensor imgs = encode_images_batch(w, batch_image_tensor(corpus, chunk, cfg));
            std::vector<TokenSequence> seqs;
            for (std::size_t r : chunk) seqs.push_back(corpus.tokens[r]);
            Tensor txts = encode_texts_batch(w, seqs);
            Tensor scale = ops::exp(w.log_logit_scale);
            Tensor loss = infonce_loss(imgs, txts, scale);
            if (!loss.all_finite())
                throw NumericError("non-finite contrastive loss at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(steps));
            loss_sum += loss.item();
            auto grads = tape.gradients(loss, params);
            adam.lr = lr_at(global_step);
            adam_step(params, grads, adam);
            w.clamp_logit_scale();
            ++steps;
            ++global_step;
        }
        EpochMetrics em;
        em.epoch = epoch;
        em.loss = steps == 0 ? 0.0 : loss_sum / static_cast<double>(steps);
        const RetrievalAccuracy acc = batch_retrieval_top1(w, corpus, split.holdout_rows, pcfg.batch_size);
        em.holdout_top1 = acc.exact;
        em.holdout_top1_any = acc.any_answer;
        result.metrics.push_back(em);
        if (metrics_stream) {
            nlohmann::json j;
            j["epoch"] = em.epoch;
            j["loss"] = em.loss;
            j["holdout_top1"] = em.holdout_top1;
            j["holdout_top1_any"] = em.holdout_top1_any;
            (*metrics_stream) << j.dump() << "\n";
            metrics_stream->flush();
        }
    }

    if (!pcfg.checkpoint_path.empty()) save_checkpoint(pcfg.checkpoint_path, w);
    result.checkpoint_hash = checkpoint_hash(w);
    return result;
}

}  // namespace taskbias
