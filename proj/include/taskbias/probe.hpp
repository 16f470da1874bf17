#pragma once

#include <algorithm>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskbias/backbone.hpp"
#include "taskbias/pretrain.hpp"
#include "taskbias/synth.hpp"

namespace taskbias {

// ----------------------------- text prefixes -----------------------------

// Task-directed prefixes; the object entry is completed with "a"/"an" chosen
// by the option's leading vowel.
struct PrefixTable {
    std::map<TaskId, std::string> prefixes = {
        {TaskId::scene_text, "This is a photo of text which reads"},
        {TaskId::action, "This is a photo of someone who is"},
        {TaskId::object, "This is a photo of"},
    };
    bool object_takes_article = true;

    static PrefixTable uniform() {
        PrefixTable t;
        for (TaskId task : kAllTasks) t.prefixes[task] = std::string(kUniformPrefix);
        t.object_takes_article = false;
        return t;
    }

    std::string apply(TaskId task, const std::string& option) const {
        auto it = prefixes.find(task);
        if (it == prefixes.end()) throw DataError("prefix table has no entry for task " + to_string(task));
        std::string prefix = it->second;
        while (!prefix.empty() && prefix.back() == ' ') prefix.pop_back();
        if (task == TaskId::object && object_takes_article) {
            const bool vowel = !option.empty() && std::string("aeiou").find(static_cast<char>(std::tolower(option[0]))) !=
                                                      std::string::npos;
            prefix += vowel ? " an" : " a";
        }
        return prefix + " " + option;
    }
};

inline std::string uniform_prefixed(const std::string& option) { return std::string(kUniformPrefix) + " " + option; }

// ----------------------------- text embedding cache -----------------------------

// Embeddings are pure functions of (theta, string); probes reuse them heavily.
class TextEmbeddingCache {
public:
    explicit TextEmbeddingCache(BackboneWeights& w) : w_(w) {}

    const Embedding& get(const std::string& text) {
        auto it = cache_.find(text);
        if (it != cache_.end()) return it->second;
        return cache_.emplace(text, encode_text(w_, text)).first->second;
    }

private:
    BackboneWeights& w_;
    std::map<std::string, Embedding> cache_;
};

// ----------------------------- zero-shot classification -----------------------------

struct RankedOption {
    std::string option;
    double probability = 0.0;
    std::size_t index = 0;  // position in the input option list
};

// softmax over scaled similarities, descending, ties by option index
inline std::vector<RankedOption> zero_shot_classify(BackboneWeights& w, std::span<const double> image,
                                                    std::span<const std::string> options, const std::string& prefix,
                                                    const VisualPrompt* prompt = nullptr,
                                                    TextEmbeddingCache* cache = nullptr) {
    if (options.empty()) throw DataError("zero_shot_classify needs at least one option");
    const Embedding img = encode_image(w, image, prompt).embedding;
    const double scale = w.logit_scale();
    std::vector<double> logits(options.size());
    for (std::size_t i = 0; i < options.size(); ++i) {
        const std::string text = prefix.empty() ? options[i] : prefix + " " + options[i];
        const Embedding txt = cache ? cache->get(text) : encode_text(w, text);
        logits[i] = similarity(img, txt, scale);
    }
    Tensor probs = ops::softmax(Tensor::from_data({options.size()}, logits));
    std::vector<RankedOption> ranked(options.size());
    for (std::size_t i = 0; i < options.size(); ++i) ranked[i] = {options[i], probs.ptr()[i], i};
    std::stable_sort(ranked.begin(), ranked.end(), [](const RankedOption& a, const RankedOption& b) {
        return a.probability > b.probability;
    });
    return ranked;
}

// ----------------------------- per-image bias probe -----------------------------

// Normalized two-way preference between the correct answers of two tasks.
struct BiasScore {
    std::uint64_t image_id = 0;
    TaskId task_a = TaskId::object;
    TaskId task_b = TaskId::scene_text;
    double p_b = 0.5;  // probability mass on task B's answer
    TaskId chosen = TaskId::object;
    bool tie = false;

    double p_a() const { return 1.0 - p_b; }
};

// Both labels receive the uniform prefix; p_b comes from the two-way softmax.
inline BiasScore probe_pair(BackboneWeights& w, std::span<const double> image, std::uint64_t image_id, TaskId task_a,
                            const std::string& label_a, TaskId task_b, const std::string& label_b,
                            TextEmbeddingCache* cache = nullptr) {
    const Embedding img = encode_image(w, image).embedding;
    const double scale = w.logit_scale();
    const std::string ta = uniform_prefixed(label_a), tb = uniform_prefixed(label_b);
    const double sa = similarity(img, cache ? cache->get(ta) : encode_text(w, ta), scale);
    const double sb = similarity(img, cache ? cache->get(tb) : encode_text(w, tb), scale);
    Tensor probs = ops::softmax(Tensor::from_data({2}, {sa, sb}));
    BiasScore score;
    score.image_id = image_id;
    score.task_a = task_a;
    score.task_b = task_b;
    score.p_b = probs.ptr()[1];
    if (score.p_b == 0.5) {
        score.tie = true;  // deterministic: the lexicographically smaller task wins
        score.chosen = to_string(task_a) <= to_string(task_b) ? task_a : task_b;
    } else {
        score.chosen = score.p_b > 0.5 ? task_b : task_a;
    }
    return score;
}

// probe every id in the list against its own ground-truth labels
inline std::vector<BiasScore> probe_dataset(BackboneWeights& w, const Manifest& manifest,
                                            std::span<const std::uint64_t> ids, TaskId task_a, TaskId task_b) {
    TextEmbeddingCache cache(w);
    std::vector<BiasScore> out;
    out.reserve(ids.size());
    for (std::uint64_t id : ids) {
        const ManifestEntry& e = manifest.by_id(id);
        const std::vector<std::uint8_t> px = load_entry_pixels(manifest, e, w.config.image_size);
        std::vector<double> img(px.size());
        for (std::size_t i = 0; i < px.size(); ++i) img[i] = static_cast<double>(px[i]) / 255.0;
        out.push_back(probe_pair(w, img, id, task_a, label_for(e.labels, task_a), task_b, label_for(e.labels, task_b),
                                 &cache));
    }
    return out;
}

inline void write_bias_scores(const std::string& path, std::span<const BiasScore> scores) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    for (const BiasScore& s : scores) {
        nlohmann::json j;
        j["image_id"] = s.image_id;
        j["task_a"] = to_string(s.task_a);
        j["task_b"] = to_string(s.task_b);
        j["p_b"] = s.p_b;
        j["chosen"] = to_string(s.chosen);
        j["tie"] = s.tie;
        out << j.dump() << "\n";
    }
}

// ----------------------------- histogram -----------------------------

struct BiasHistogram {
    std::vector<double> edges;   // bins+1 edges over [0,1]
    std::vector<std::size_t> counts;
    std::size_t total = 0;

    std::vector<double> densities() const {
        std::vector<double> d(counts.size(), 0.0);
        if (total == 0) return d;
        for (std::size_t i = 0; i < counts.size(); ++i)
            d[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
        return d;
    }

    // fraction of mass in the outermost `deciles` bins on each side
    double outer_mass(std::size_t outer_bins) const {
        std::size_t acc = 0;
        for (std::size_t i = 0; i < counts.size(); ++i)
            if (i < outer_bins || i + outer_bins >= counts.size()) acc += counts[i];
        return total == 0 ? 0.0 : static_cast<double>(acc) / static_cast<double>(total);
    }
};

inline BiasHistogram bias_histogram(std::span<const BiasScore> scores, std::size_t bins = 20) {
    if (bins < 2) throw DataError("histogram needs at least 2 bins");
    if (scores.empty()) throw DataError("histogram of no scores");
    BiasHistogram h;
    h.edges.resize(bins + 1);
    for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = static_cast<double>(i) / static_cast<double>(bins);
    h.counts.assign(bins, 0);
    for (const BiasScore& s : scores) {
        std::size_t bin = static_cast<std::size_t>(s.p_b * static_cast<double>(bins));
        if (bin >= bins) bin = bins - 1;  // p_b == 1.0 lands in the last bin
        h.counts[bin]++;
    }
    h.total = scores.size();
    return h;
}

inline nlohmann::json histogram_json(const BiasHistogram& h) {
    nlohmann::json j;
    j["edges"] = h.edges;
    j["counts"] = h.counts;
    j["densities"] = h.densities();
    j["total"] = h.total;
    return j;
}

// text-art rendering, one row per bin
inline void print_histogram(const BiasHistogram& h, std::ostream& os, const std::string& title = "") {
    if (!title.empty()) os << title << "\n";
    std::size_t max_count = 1;
    for (std::size_t c : h.counts) max_count = std::max(max_count, c);
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        char lo[16], hi[16];
        std::snprintf(lo, sizeof(lo), "%.2f", h.edges[i]);
        std::snprintf(hi, sizeof(hi), "%.2f", h.edges[i + 1]);
        const std::size_t bar = (h.counts[i] * 50 + max_count - 1) / max_count;
        os << "[" << lo << "," << hi << ") " << std::string(bar, '#') << " " << h.counts[i] << "\n";
    }
}

// ----------------------------- extreme bias report -----------------------------

struct ExtremeBiasReport {
    std::vector<BiasScore> toward_a;  // k smallest p_b, ascending
    std::vector<BiasScore> toward_b;  // k largest p_b, descending
};

inline ExtremeBiasReport extreme_bias_report(std::span<const BiasScore> scores, std::size_t k) {
    if (k > scores.size()) throw DataError("extreme bias report asks for more examples than probed");
    std::vector<BiasScore> sorted(scores.begin(), scores.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const BiasScore& a, const BiasScore& b) { return a.p_b < b.p_b; });
    ExtremeBiasReport r;
    r.toward_a.assign(sorted.begin(), sorted.begin() + static_cast<long>(k));
    r.toward_b.assign(sorted.rbegin(), sorted.rbegin() + static_cast<long>(k));
    return r;
}

// ----------------------------- text prefix steering -----------------------------

struct PrefixDelta {
    TaskId task;
    double rate_uniform_pct = 0.0;   // intended-task selection with the uniform prefix
    double rate_directed_pct = 0.0;  // with the task-directed prefix on every option
    double delta_pct() const { return rate_directed_pct - rate_uniform_pct; }
};

// For each task of the pair: apply that task's prefix to BOTH options and
// measure the change in how often the model picks the task's answer.
inline std::vector<PrefixDelta> text_prefix_delta(BackboneWeights& w, const Manifest& manifest,
                                                  const PairwiseDataset& ds, const PrefixTable& prefixes) {
    TextEmbeddingCache cache(w);
    const double scale = w.logit_scale();
    std::vector<PrefixDelta> out;
    for (TaskId intended : {ds.task_a, ds.task_b}) {
        const TaskId other = intended == ds.task_a ? ds.task_b : ds.task_a;
        std::size_t uniform_hits = 0, directed_hits = 0, total = 0;
        for (std::uint64_t id : ds.test) {
            const ManifestEntry& e = manifest.by_id(id);
            const std::vector<std::uint8_t> px = load_entry_pixels(manifest, e, w.config.image_size);
            std::vector<double> img(px.size());
            for (std::size_t i = 0; i < px.size(); ++i) img[i] = static_cast<double>(px[i]) / 255.0;
            const Embedding emb = encode_image(w, img).embedding;
            const std::string& want = label_for(e.labels, intended);
            const std::string& alt = label_for(e.labels, other);

            const double u_want = similarity(emb, cache.get(uniform_prefixed(want)), scale);
            const double u_alt = similarity(emb, cache.get(uniform_prefixed(alt)), scale);
            uniform_hits += u_want > u_alt;

            const double d_want = similarity(emb, cache.get(prefixes.apply(intended, want)), scale);
            const double d_alt = similarity(emb, cache.get(prefixes.apply(intended, alt)), scale);
            directed_hits += d_want > d_alt;
            ++total;
        }
        PrefixDelta d;
        d.task = intended;
        d.rate_uniform_pct = 100.0 * static_cast<double>(uniform_hits) / static_cast<double>(total);
        d.rate_directed_pct = 100.0 * static_cast<double>(directed_hits) / static_cast<double>(total);
        out.push_back(d);
    }
    return out;
}

}  // namespace taskbias
