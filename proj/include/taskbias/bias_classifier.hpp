#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "taskbias/rollout.hpp"

namespace taskbias {

// ----------------------------- dataset -----------------------------

// Per-image feature bundles labeled by the task the unprompted model chose.
struct BiasDirectionDataset {
    std::size_t image_size = 32;
    std::size_t embed_dim = 0;
    std::vector<std::vector<double>> images;      // raw pixels
    std::vector<std::vector<double>> overlays;    // rollout-overlay pixels
    std::vector<std::vector<double>> embeddings;  // unprompted image embeddings
    std::vector<std::size_t> labels;              // 0 -> task_a chosen, 1 -> task_b chosen
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> test_idx;

    double test_majority_fraction() const {
        if (test_idx.empty()) return 1.0;
        std::size_t ones = 0;
        for (std::size_t i : test_idx) ones += labels[i];
        const double f = static_cast<double>(ones) / static_cast<double>(test_idx.size());
        return std::max(f, 1.0 - f);
    }
};

// pseudo-label: purely a function of the stored probe output
inline std::size_t bias_direction_label(const BiasScore& s) { return s.chosen == s.task_b ? 1 : 0; }

// Assemble features for every id in the pairwise dataset. The test split is
// downsampled (largest ids first) until the majority class holds at most 55%.
inline BiasDirectionDataset build_bias_direction_dataset(BackboneWeights& w, const Manifest& manifest,
                                                         const PairwiseDataset& ds,
                                                         std::span<const BiasScore> train_scores,
                                                         std::span<const BiasScore> test_scores,
                                                         double max_majority = 0.55) {
    if (train_scores.size() != ds.train.size() || test_scores.size() != ds.test.size())
        throw DataError("bias scores do not cover the pairwise dataset");
    BiasDirectionDataset out;
    out.image_size = w.config.image_size;
    out.embed_dim = w.config.shared_dim;

    auto add_example = [&](std::uint64_t id, const BiasScore& score) {
        const ManifestEntry& e = manifest.by_id(id);
        const std::vector<std::uint8_t> px = load_entry_pixels(manifest, e, w.config.image_size);
        std::vector<double> img(px.size());
        for (std::size_t i = 0; i < px.size(); ++i) img[i] = static_cast<double>(px[i]) / 255.0;
        ImageEncodeResult enc = encode_image(w, img);
        RolloutMap map = attention_rollout(enc.attention);
        const std::vector<std::uint8_t> overlay_px = render_overlay(img, w.config.image_size, map.values, map.grid, false);
        std::vector<double> overlay(overlay_px.size());
        for (std::size_t i = 0; i < overlay_px.size(); ++i) overlay[i] = static_cast<double>(overlay_px[i]) / 255.0;
        out.images.push_back(std::move(img));
        out.overlays.push_back(std::move(overlay));
        out.embeddings.push_back(enc.embedding);
        out.labels.push_back(bias_direction_label(score));
        return out.labels.size() - 1;
    };

    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        if (train_scores[i].image_id != ds.train[i]) throw DataError("train scores out of order");
        out.train_idx.push_back(add_example(ds.train[i], train_scores[i]));
    }
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
        if (test_scores[i].image_id != ds.test[i]) throw DataError("test scores out of order");
        out.test_idx.push_back(add_example(ds.test[i], test_scores[i]));
    }

    // near-balance the test split
    while (out.test_idx.size() >= 2 && out.test_majority_fraction() > max_majority) {
        std::size_t ones = 0;
        for (std::size_t i : out.test_idx) ones += out.labels[i];
        const std::size_t majority = ones * 2 > out.test_idx.size() ? 1 : 0;
        bool dropped = false;
        for (auto it = out.test_idx.rbegin(); it != out.test_idx.rend(); ++it) {
            if (out.labels[*it] == majority) {
                out.test_idx.erase(std::next(it).base());
                dropped = true;
                break;
            }
        }
        if (!dropped) break;
    }
    if (out.test_idx.empty()) throw DataError("test split vanished while balancing");
    return out;
}

// ----------------------------- frequent baseline -----------------------------

struct FrequentBaselineResult {
    double train_majority_acc_pct = 0.0;  // predict the train-side majority
    double test_majority_acc_pct = 0.0;   // majority computed inside the test set
};

inline FrequentBaselineResult frequent_baseline(std::span<const std::size_t> train_labels,
                                                std::span<const std::size_t> test_labels) {
    if (train_labels.empty() || test_labels.empty()) throw DataError("frequent baseline needs non-empty splits");
    auto majority = [](std::span<const std::size_t> labels) {
        std::size_t ones = 0;
        for (std::size_t l : labels) ones += l;
        return ones * 2 > labels.size() ? std::size_t{1} : std::size_t{0};
    };
    auto accuracy = [&](std::size_t predicted) {
        std::size_t hits = 0;
        for (std::size_t l : test_labels) hits += l == predicted;
        return 100.0 * static_cast<double>(hits) / static_cast<double>(test_labels.size());
    };
    return {accuracy(majority(train_labels)), accuracy(majority(test_labels))};
}

// ----------------------------- mlp head -----------------------------

struct ClassifierConfig {
    std::size_t epochs = 40;
    std::size_t batch_size = 64;
    double lr = 1e-4;  // Adam, matching the probing classifiers' schedule
    std::uint64_t seed = 0;
};

namespace detail_cls {

struct Affine {
    Tensor w, b;

    static Affine make(std::size_t in, std::size_t out, Rng& rng) {
        Affine a;
        a.w = Tensor::randn({in, out}, rng, std::sqrt(2.0 / static_cast<double>(in)), true);
        a.b = Tensor::zeros({out}, true);
        return a;
    }

    Tensor forward(const Tensor& x) const { return ops::add_rowwise(ops::matmul(x, w), b); }
};

// the shared 4-layer head: widths 256/128/64/2 with relu between
struct MlpHead {
    std::vector<Affine> layers;

    static MlpHead make(std::size_t input_dim, Rng& rng) {
        MlpHead h;
        const std::size_t widths[4] = {256, 128, 64, 2};
        std::size_t in = input_dim;
        for (std::size_t w : widths) {
            h.layers.push_back(Affine::make(in, w, rng));
            in = w;
        }
        return h;
    }

    Tensor forward(Tensor x) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            x = layers[i].forward(x);
            if (i + 1 < layers.size()) x = ops::relu(x);
        }
        return x;
    }

    void collect(std::vector<Tensor>& params) const {
        for (const Affine& a : layers) {
            params.push_back(a.w);
            params.push_back(a.b);
        }
    }
};

// 4-block convolutional feature extractor for 32x32x3 inputs
struct ConvTrunk {
    Tensor k1, b1, k2, b2, k3, b3, k4, b4;
    Affine head;  // 64 -> feature_dim

    static ConvTrunk make(std::size_t feature_dim, Rng& rng) {
        ConvTrunk t;
        auto kernel = [&](std::size_t cin, std::size_t cout) {
            return Tensor::randn({9 * cin, cout}, rng, std::sqrt(2.0 / static_cast<double>(9 * cin)), true);
        };
        t.k1 = kernel(3, 16);
        t.b1 = Tensor::zeros({16}, true);
        t.k2 = kernel(16, 32);
        t.b2 = Tensor::zeros({32}, true);
        t.k3 = kernel(32, 64);
        t.b3 = Tensor::zeros({64}, true);
        t.k4 = kernel(64, 64);
        t.b4 = Tensor::zeros({64}, true);
        t.head = Affine::make(64, feature_dim, rng);
        return t;
    }

    // x flat [B, 32, 32, 3]
    Tensor forward(const Tensor& x, std::size_t batch) const {
        Tensor h = ops::relu(ops::add_rowwise(ops::matmul(ops::im2col3x3(x, batch, 32, 32, 3), k1), b1));
        h = ops::maxpool2x2(h, batch, 32, 32, 16);
        h = ops::relu(ops::add_rowwise(ops::matmul(ops::im2col3x3(h, batch, 16, 16, 16), k2), b2));
        h = ops::maxpool2x2(h, batch, 16, 16, 32);
        h = ops::relu(ops::add_rowwise(ops::matmul(ops::im2col3x3(h, batch, 8, 8, 32), k3), b3));
        h = ops::maxpool2x2(h, batch, 8, 8, 64);
        h = ops::relu(ops::add_rowwise(ops::matmul(ops::im2col3x3(h, batch, 4, 4, 64), k4), b4));
        h = ops::global_avg_pool(h, batch, 16, 64);
        return head.forward(h);
    }

    void collect(std::vector<Tensor>& params) const {
        for (const Tensor& t : {k1, b1, k2, b2, k3, b3, k4, b4}) params.push_back(t);
        params.push_back(head.w);
        params.push_back(head.b);
    }
};

inline Tensor batch_rows(const std::vector<std::vector<double>>& features, std::span<const std::size_t> idx,
                         std::size_t dim) {
    std::vector<double> data;
    data.reserve(idx.size() * dim);
    for (std::size_t i : idx) {
        if (features[i].size() != dim) throw DataError("feature dimension mismatch");
        data.insert(data.end(), features[i].begin(), features[i].end());
    }
    return Tensor::from_data({idx.size(), dim}, std::move(data));
}

template <typename ForwardFn>
inline double train_and_score(const BiasDirectionDataset& ds, const ClassifierConfig& cfg,
                              std::vector<Tensor>& params, ForwardFn&& forward) {
    std::size_t class_seen[2] = {0, 0};
    for (std::size_t i : ds.train_idx) class_seen[ds.labels[i]]++;
    if (class_seen[0] == 0 || class_seen[1] == 0)
        throw DataError("training split is degenerate: only one bias direction present");

    AdamState adam;
    adam.lr = cfg.lr;
    Rng order_rng(mix_seed(cfg.seed, fnv1a64("classifier-order")));
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(ds.train_idx.begin(), ds.train_idx.end());
        order_rng.shuffle(order);
        for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - at);
            auto chunk = std::span<const std::size_t>(order).subspan(at, n);
            std::vector<std::size_t> targets;
            for (std::size_t i : chunk) targets.push_back(ds.labels[i]);
            GradientTape tape;
            TapeScope scope(tape);
            Tensor logits = forward(chunk);
            Tensor loss = ops::cross_entropy_rows(logits, std::move(targets));
            if (!loss.all_finite()) throw NumericError("non-finite classifier loss");
            auto grads = tape.gradients(loss, params);
            adam_step(params, grads, adam);
        }
    }

    std::size_t hits = 0;
    const std::size_t eval_batch = 128;
    for (std::size_t at = 0; at < ds.test_idx.size(); at += eval_batch) {
        const std::size_t n = std::min(eval_batch, ds.test_idx.size() - at);
        auto chunk = std::span<const std::size_t>(ds.test_idx).subspan(at, n);
        Tensor logits = forward(chunk);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t pred = logits.ptr()[i * 2 + 1] > logits.ptr()[i * 2] ? 1 : 0;
            hits += pred == ds.labels[chunk[i]];
        }
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(ds.test_idx.size());
}

}  // namespace detail_cls

// ----------------------------- classifiers -----------------------------

// shallow MLP on the image embedding
inline double train_embedding_mlp(const BiasDirectionDataset& ds, const ClassifierConfig& cfg) {
    Rng rng(mix_seed(cfg.seed, fnv1a64("embedding-mlp")));
    detail_cls::MlpHead head = detail_cls::MlpHead::make(ds.embed_dim, rng);
    std::vector<Tensor> params;
    head.collect(params);
    return detail_cls::train_and_score(ds, cfg, params, [&](std::span<const std::size_t> chunk) {
        return head.forward(detail_cls::batch_rows(ds.embeddings, chunk, ds.embed_dim));
    });
}

// small convolutional classifier on raw images or overlay images
inline double train_image_classifier(const BiasDirectionDataset& ds, bool use_overlays, const ClassifierConfig& cfg) {
    Rng rng(mix_seed(cfg.seed, fnv1a64(use_overlays ? "image-overlay-cls" : "image-cls")));
    detail_cls::ConvTrunk trunk = detail_cls::ConvTrunk::make(2, rng);
    std::vector<Tensor> params;
    trunk.collect(params);
    const auto& features = use_overlays ? ds.overlays : ds.images;
    const std::size_t dim = ds.image_size * ds.image_size * 3;
    return detail_cls::train_and_score(ds, cfg, params, [&](std::span<const std::size_t> chunk) {
        return trunk.forward(detail_cls::batch_rows(features, chunk, dim), chunk.size());
    });
}

// 256-dim image feature fused with a 256-dim projected embedding, MLP head
inline double train_fused_classifier(const BiasDirectionDataset& ds, const ClassifierConfig& cfg,
                                     bool zero_image_branch = false) {
    Rng rng(mix_seed(cfg.seed, fnv1a64("fused-cls")));
    detail_cls::ConvTrunk trunk = detail_cls::ConvTrunk::make(256, rng);
    detail_cls::Affine embed_proj = detail_cls::Affine::make(ds.embed_dim, 256, rng);
    detail_cls::MlpHead head = detail_cls::MlpHead::make(512, rng);
    std::vector<Tensor> params;
    trunk.collect(params);
    params.push_back(embed_proj.w);
    params.push_back(embed_proj.b);
    head.collect(params);
    const std::size_t dim = ds.image_size * ds.image_size * 3;
    return detail_cls::train_and_score(ds, cfg, params, [&](std::span<const std::size_t> chunk) {
        Tensor img_feat = trunk.forward(detail_cls::batch_rows(ds.overlays, chunk, dim), chunk.size());
        if (zero_image_branch) img_feat = ops::mul_scalar(img_feat, 0.0);
        Tensor emb_feat = embed_proj.forward(detail_cls::batch_rows(ds.embeddings, chunk, ds.embed_dim));
        return head.forward(ops::concat_cols(img_feat, emb_feat));
    });
}

struct BiasClassifierReport {
    double frequent_train_pct = 0.0;
    double frequent_test_pct = 0.0;
    double image_pct = 0.0;
    double image_overlay_pct = 0.0;
    double embedding_pct = 0.0;
    double fused_pct = 0.0;
};

inline nlohmann::json classifier_report_json(const BiasClassifierReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    auto row = [&](const std::string& name, double acc) {
        rows.push_back({{"experiment", name}, {"test_accuracy_pct", acc}});
    };
    row("frequent_train_majority", r.frequent_train_pct);
    row("frequent_test_majority", r.frequent_test_pct);
    row("image", r.image_pct);
    row("image_attention_overlay", r.image_overlay_pct);
    row("embedding", r.embedding_pct);
    row("embedding_image_attention", r.fused_pct);
    return rows;
}

inline BiasClassifierReport run_bias_classifiers(const BiasDirectionDataset& ds, const ClassifierConfig& mlp_cfg,
                                                 const ClassifierConfig& conv_cfg) {
    BiasClassifierReport r;
    std::vector<std::size_t> train_labels, test_labels;
    for (std::size_t i : ds.train_idx) train_labels.push_back(ds.labels[i]);
    for (std::size_t i : ds.test_idx) test_labels.push_back(ds.labels[i]);
    const FrequentBaselineResult fb = frequent_baseline(train_labels, test_labels);
    r.frequent_train_pct = fb.train_majority_acc_pct;
    r.frequent_test_pct = fb.test_majority_acc_pct;
    r.embedding_pct = train_embedding_mlp(ds, mlp_cfg);
    r.image_pct = train_image_classifier(ds, false, conv_cfg);
    r.image_overlay_pct = train_image_classifier(ds, true, conv_cfg);
    r.fused_pct = train_fused_classifier(ds, conv_cfg);
    return r;
}

}  // namespace taskbias
