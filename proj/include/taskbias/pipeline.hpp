#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskbias/bias_classifier.hpp"
#include "taskbias/pretrain.hpp"
#include "taskbias/probe.hpp"
#include "taskbias/prompt.hpp"
#include "taskbias/rollout.hpp"
#include "taskbias/synth.hpp"

namespace taskbias {

// ----------------------------- run configuration -----------------------------

struct RunConfig {
    std::uint64_t seed = 0;
    std::string corpus_dir = "corpus";
    std::string report_dir = "reports";
    std::string run_id = "default";
    int workers = 1;
    bool deterministic = false;

    std::size_t corpus_count = 4096;
    std::string caption_policy = "content_hashed";
    bool caption_wrap = true;

    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t embed_width = 64;
    std::size_t depth = 3;
    std::size_t heads = 4;
    std::size_t shared_dim = 64;
    std::size_t max_text_len = 48;

    std::size_t pretrain_epochs = 45;
    std::size_t pretrain_batch = 32;
    double pretrain_lr = 1e-3;
    std::size_t pretrain_warmup = 200;
    double holdout_fraction = 0.1;

    double split_fraction = 0.9;

    std::size_t probe_bins = 20;
    std::size_t probe_extreme_k = 8;

    std::size_t tune_epochs = 1;
    std::size_t tune_batch = 32;
    double tune_lr = 1e-2;
    std::size_t vitp_tokens = 1;
    std::size_t vp_ps_small = 1;
    std::size_t vp_ps_large = 5;

    std::size_t cls_mlp_epochs = 40;
    std::size_t cls_conv_epochs = 8;
    std::size_t cls_batch = 64;
    double cls_lr = 1e-4;

    double attn_identity_mix = 0.5;
    std::string attn_mode = "full";
    std::size_t attn_export_count = 6;

    BackboneConfig backbone() const {
        BackboneConfig cfg;
        cfg.image_size = image_size;
        cfg.patch_size = patch_size;
        cfg.embed_width = embed_width;
        cfg.depth = depth;
        cfg.heads = heads;
        cfg.shared_dim = shared_dim;
        cfg.max_text_len = max_text_len;
        return cfg;
    }

    RolloutMode rollout_mode() const {
        if (attn_mode == "full") return RolloutMode::full;
        if (attn_mode == "final_layer") return RolloutMode::final_layer;
        throw DataError("attn.mode must be 'full' or 'final_layer'");
    }
};

namespace detail_cfg {

struct Field {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const std::uint64_t out = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw DataError("config key '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

inline double parse_f64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw DataError("config key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw DataError("config key '" + key + "' expects true/false, got '" + v + "'");
}

inline std::string fmt_f64(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        auto add_u64 = [&](const char* key, std::size_t RunConfig::* member) {
            f.push_back({key,
                         [key, member](RunConfig& c, const std::string& v) { c.*member = parse_u64(key, v); },
                         [member](const RunConfig& c) { return std::to_string(c.*member); }});
        };
        auto add_f64 = [&](const char* key, double RunConfig::* member) {
            f.push_back({key,
                         [key, member](RunConfig& c, const std::string& v) { c.*member = parse_f64(key, v); },
                         [member](const RunConfig& c) { return fmt_f64(c.*member); }});
        };
        auto add_str = [&](const char* key, std::string RunConfig::* member) {
            f.push_back({key, [member](RunConfig& c, const std::string& v) { c.*member = v; },
                         [member](const RunConfig& c) { return c.*member; }});
        };
        auto add_bool = [&](const char* key, bool RunConfig::* member) {
            f.push_back({key,
                         [key, member](RunConfig& c, const std::string& v) { c.*member = parse_bool(key, v); },
                         [member](const RunConfig& c) { return c.*member ? "true" : "false"; }});
        };
        f.push_back({"seed",
                     [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
                     [](const RunConfig& c) { return std::to_string(c.seed); }});
        add_str("corpus_dir", &RunConfig::corpus_dir);
        add_str("report_dir", &RunConfig::report_dir);
        add_str("run_id", &RunConfig::run_id);
        f.push_back({"workers",
                     [](RunConfig& c, const std::string& v) { c.workers = static_cast<int>(parse_u64("workers", v)); },
                     [](const RunConfig& c) { return std::to_string(c.workers); }});
        add_bool("deterministic", &RunConfig::deterministic);
        add_u64("corpus.count", &RunConfig::corpus_count);
        add_str("corpus.policy", &RunConfig::caption_policy);
        add_bool("corpus.wrap", &RunConfig::caption_wrap);
        add_u64("model.image_size", &RunConfig::image_size);
        add_u64("model.patch_size", &RunConfig::patch_size);
        add_u64("model.width", &RunConfig::embed_width);
        add_u64("model.depth", &RunConfig::depth);
        add_u64("model.heads", &RunConfig::heads);
        add_u64("model.dim", &RunConfig::shared_dim);
        add_u64("model.max_text_len", &RunConfig::max_text_len);
        add_u64("pretrain.epochs", &RunConfig::pretrain_epochs);
        add_u64("pretrain.batch", &RunConfig::pretrain_batch);
        add_f64("pretrain.lr", &RunConfig::pretrain_lr);
        add_u64("pretrain.warmup", &RunConfig::pretrain_warmup);
        add_f64("pretrain.holdout", &RunConfig::holdout_fraction);
        add_f64("split.fraction", &RunConfig::split_fraction);
        add_u64("probe.bins", &RunConfig::probe_bins);
        add_u64("probe.extreme_k", &RunConfig::probe_extreme_k);
        add_u64("tune.epochs", &RunConfig::tune_epochs);
        add_u64("tune.batch", &RunConfig::tune_batch);
        add_f64("tune.lr", &RunConfig::tune_lr);
        add_u64("tune.tokens", &RunConfig::vitp_tokens);
        add_u64("tune.ps_small", &RunConfig::vp_ps_small);
        add_u64("tune.ps_large", &RunConfig::vp_ps_large);
        add_u64("cls.mlp_epochs", &RunConfig::cls_mlp_epochs);
        add_u64("cls.conv_epochs", &RunConfig::cls_conv_epochs);
        add_u64("cls.batch", &RunConfig::cls_batch);
        add_f64("cls.lr", &RunConfig::cls_lr);
        add_f64("attn.identity_mix", &RunConfig::attn_identity_mix);
        add_str("attn.mode", &RunConfig::attn_mode);
        add_u64("attn.export_count", &RunConfig::attn_export_count);
        return f;
    }();
    return table;
}

inline const Field& find_field(const std::string& key) {
    for (const Field& f : fields())
        if (f.key == key) return f;
    throw DataError("unknown config key '" + key + "'");
}

}  // namespace detail_cfg

inline void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value) {
    detail_cfg::find_field(key).set(cfg, value);
}

// plain `key = value` lines, '#' comments
inline void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("config file not found: '" + path + "'");
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError("config line " + std::to_string(line_no) + " is not 'key = value'");
        apply_config_line(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

inline std::string resolved_config_text(const RunConfig& cfg) {
    std::ostringstream os;
    for (const auto& f : detail_cfg::fields()) os << f.key << " = " << f.get(cfg) << "\n";
    return os.str();
}

// ----------------------------- artifact paths -----------------------------

struct RunPaths {
    std::filesystem::path corpus;
    std::filesystem::path run;

    explicit RunPaths(const RunConfig& cfg) : corpus(cfg.corpus_dir), run(std::filesystem::path(cfg.report_dir) / cfg.run_id) {}

    std::string manifest() const { return (corpus / "manifest.jsonl").string(); }
    std::string split(const std::string& pair_name) const {
        return (corpus / "splits" / (pair_name + ".json")).string();
    }
    std::string checkpoint() const { return (run / "checkpoint.bin").string(); }
    std::string pretrain_metrics() const { return (run / "pretrain_metrics.jsonl").string(); }
    std::string probe_scores(const std::string& pair) const { return (run / "probe" / (pair + "_scores.jsonl")).string(); }
    std::string probe_histogram(const std::string& pair) const {
        return (run / "probe" / (pair + "_histogram.json")).string();
    }
    std::string probe_extremes(const std::string& pair) const {
        return (run / "probe" / (pair + "_extremes.json")).string();
    }
    std::string prefix_deltas(const std::string& pair) const { return (run / "prefix" / (pair + "_deltas.json")).string(); }
    std::string prompt(const std::string& pair, const std::string& direction, const std::string& method) const {
        return (run / "prompts" / (pair + "__" + direction + "__" + method + ".bin")).string();
    }
    std::string prompt_log(const std::string& pair, const std::string& direction, const std::string& method) const {
        return (run / "prompts" / (pair + "__" + direction + "__" + method + "_log.jsonl")).string();
    }
    std::string disambiguation() const { return (run / "disambiguation.json").string(); }
    std::string downstream() const { return (run / "downstream.json").string(); }
    std::string attention_dir() const { return (run / "attention").string(); }
    std::string region_stats() const { return (run / "attention" / "region_stats.json").string(); }
    std::string classifiers(const std::string& pair) const {
        return (run / "classifiers" / (pair + "_classifiers.json")).string();
    }
    std::string summary() const { return (run / "summary.json").string(); }
    std::string resolved_config() const { return (run / "resolved-config.txt").string(); }
};

inline const std::vector<std::pair<TaskId, TaskId>>& task_pairs() {
    static const std::vector<std::pair<TaskId, TaskId>> pairs = {
        {TaskId::object, TaskId::scene_text},
        {TaskId::object, TaskId::action},
        {TaskId::action, TaskId::scene_text},
    };
    return pairs;
}

inline std::string pair_name(TaskId a, TaskId b) { return to_string(a) + "_vs_" + to_string(b); }

namespace pipeline {

inline void write_text(const std::string& path, const std::string& text) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << text;
}

inline void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("report not found: '" + path + "'");
    nlohmann::json j;
    in >> j;
    return j;
}

inline void prepare_run(const RunConfig& cfg) {
    RunPaths paths(cfg);
    std::filesystem::create_directories(paths.run);
    write_text(paths.resolved_config(), resolved_config_text(cfg));
    set_workers(cfg.deterministic ? 1 : cfg.workers);
}

// ----------------------------- steps -----------------------------

inline void gen_data(const RunConfig& cfg) {
    RunPaths paths(cfg);
    CorpusConfig ccfg;
    ccfg.count = cfg.corpus_count;
    ccfg.policy = CaptionPolicy::parse(cfg.caption_policy);
    ccfg.wrap_captions = cfg.caption_wrap;
    ccfg.generator.image_size = cfg.image_size;
    Manifest manifest = generate_corpus(ccfg, cfg.seed, paths.corpus.string());
    std::filesystem::create_directories(paths.corpus / "splits");
    for (const auto& [a, b] : task_pairs()) {
        PairwiseDataset ds = build_pairwise_dataset(manifest, a, b, cfg.split_fraction, cfg.seed);
        write_pairwise(paths.split(pair_name(a, b)), ds);
    }
    std::cout << "corpus: " << manifest.entries.size() << " examples under " << paths.corpus << "\n";
}

inline void pretrain(const RunConfig& cfg) {
    RunPaths paths(cfg);
    Manifest manifest = read_manifest(paths.manifest());
    PretrainConfig pcfg;
    pcfg.batch_size = cfg.pretrain_batch;
    pcfg.epochs = cfg.pretrain_epochs;
    pcfg.lr = cfg.pretrain_lr;
    pcfg.warmup_steps = cfg.pretrain_warmup;
    pcfg.seed = cfg.seed;
    pcfg.holdout_fraction = cfg.holdout_fraction;
    pcfg.checkpoint_path = paths.checkpoint();
    std::ofstream metrics(paths.pretrain_metrics(), std::ios::trunc);
    if (!metrics) throw DataError("cannot open '" + paths.pretrain_metrics() + "' for writing");
    TrainResult r = train_backbone(manifest, cfg.backbone(), pcfg, &metrics);
    std::cout << "pretrained " << cfg.pretrain_epochs << " epochs; final holdout top-1 "
              << r.metrics.back().holdout_top1 << " (any correct answer " << r.metrics.back().holdout_top1_any
              << "); checkpoint " << paths.checkpoint() << "\n";
}

inline std::vector<BiasScore> probe_split(BackboneWeights& w, const Manifest& manifest, const PairwiseDataset& ds,
                                          bool test_split) {
    return probe_dataset(w, manifest, test_split ? ds.test : ds.train, ds.task_a, ds.task_b);
}

inline void probe(const RunConfig& cfg) {
    RunPaths paths(cfg);
    Manifest manifest = read_manifest(paths.manifest());
    BackboneWeights w = load_checkpoint(paths.checkpoint());
    for (const auto& [a, b] : task_pairs()) {
        PairwiseDataset ds = read_pairwise(paths.split(pair_name(a, b)));
        std::vector<BiasScore> scores = probe_split(w, manifest, ds, true);
        std::filesystem::create_directories(paths.run / "probe");
        write_bias_scores(paths.probe_scores(ds.pair_name()), scores);
        BiasHistogram hist = bias_histogram(scores, cfg.probe_bins);
        write_json(paths.probe_histogram(ds.pair_name()), histogram_json(hist));
        print_histogram(hist, std::cout, ds.pair_name() + " (p toward " + to_string(b) + ")");

        ExtremeBiasReport ext = extreme_bias_report(scores, std::min(cfg.probe_extreme_k, scores.size()));
        nlohmann::json j;
        auto dump_side = [&](std::span<const BiasScore> side) {
            nlohmann::json rows = nlohmann::json::array();
            for (const BiasScore& s : side) {
                const ManifestEntry& e = manifest.by_id(s.image_id);
                rows.push_back({{"image_id", s.image_id},
                                {"p_b", s.p_b},
                                {"chosen", to_string(s.chosen)},
                                {"labels",
                                 {{"object", e.labels[0]}, {"action", e.labels[1]}, {"scene_text", e.labels[2]}}}});
            }
            return rows;
        };
        j["toward_" + to_string(a)] = dump_side(ext.toward_a);
        j["toward_" + to_string(b)] = dump_side(ext.toward_b);
        write_json(paths.probe_extremes(ds.pair_name()), j);
    }
}

inline void prefix_eval(const RunConfig& cfg) {
    RunPaths paths(cfg);
    Manifest manifest = read_manifest(paths.manifest());
    BackboneWeights w = load_checkpoint(paths.checkpoint());
    PrefixTable table;
    for (const auto& [a, b] : task_pairs()) {
        PairwiseDataset ds = read_pairwise(paths.split(pair_name(a, b)));
        std::vector<PrefixDelta> deltas = text_prefix_delta(w, manifest, ds, table);
        nlohmann::json rows = nlohmann::json::array();
        for (const PrefixDelta& d : deltas)
            rows.push_back({{"task", to_string(d.task)},
                            {"rate_uniform_pct", d.rate_uniform_pct},
                            {"rate_directed_pct", d.rate_directed_pct},
                            {"delta_pct", d.delta_pct()}});
        write_json(paths.prefix_deltas(ds.pair_name()), rows);
        for (const PrefixDelta& d : deltas)
            std::cout << ds.pair_name() << " toward " << to_string(d.task) << ": " << d.delta_pct()
                      << " pp (directed - uniform)\n";
    }
}

struct MethodSpec {
    std::string name;
    PromptVariant variant;
    std::size_t border = 0;
    std::size_t tokens = 0;
};

inline std::vector<MethodSpec> prompt_methods(const RunConfig& cfg) {
    return {
        {"vitp", PromptVariant::visual_token, 0, cfg.vitp_tokens},
        {"vp_ps" + std::to_string(cfg.vp_ps_small), PromptVariant::pixel_border, cfg.vp_ps_small, 0},
        {"vp_ps" + std::to_string(cfg.vp_ps_large), PromptVariant::pixel_border, cfg.vp_ps_large, 0},
    };
}

inline void tune_prompts(const RunConfig& cfg) {
    RunPaths paths(cfg);
    Manifest manifest = read_manifest(paths.manifest());
    BackboneWeights w = load_checkpoint(paths.checkpoint());
    std::filesystem::create_directories(paths.run / "prompts");
    for (const auto& [a, b] : task_pairs()) {
        PairwiseDataset ds = read_pairwise(paths.split(pair_name(a, b)));
        for (TaskId direction : {a, b}) {
            for (const MethodSpec& m : prompt_methods(cfg)) {
                TuneConfig tcfg;
                tcfg.target = direction;
                tcfg.variant = m.variant;
                tcfg.border = m.border;
                tcfg.token_count = m.tokens;
                tcfg.epochs = cfg.tune_epochs;
                tcfg.batch_size = cfg.tune_batch;
                tcfg.lr = cfg.tune_lr;
                tcfg.seed = mix_seed(cfg.seed, fnv1a64(ds.pair_name() + to_string(direction) + m.name));
                std::ofstream log(paths.prompt_log(ds.pair_name(), to_string(direction), m.name), std::ios::trunc);
                TuneResult r = tune_prompt(w, manifest, ds, tcfg, &log);
                save_prompt(paths.prompt(ds.pair_name(), to_string(direction), m.name), r.prompt);
                std::cout << "tuned " << m.name << " toward " << to_string(direction) << " on " << ds.pair_name()
                          << " (final loss " << (r.metrics.empty() ? 0.0 : r.metrics.back().loss) << ")\n";
            }
        }
    }
}

inline void eval_disambiguation_step(const RunConfig& cfg) {
    RunPaths paths(cfg);
    Manifest manifest = read_manifest(paths.manifest());
    BackboneWeights w = load_checkpoint(paths.checkpoint());
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& [a, b] : task_pairs()) {
        PairwiseDataset ds = read_pairwise(paths.split(pair_name(a, b)));
        for (TaskId direction : {a, b}) {
            rows.push_back({{"pair", ds.pair_name()},
                            {"direction", to_string(direction)},
                            {"method", "no_prompt"},
                            {"selection_pct", eval_disambiguation(w, manifest, ds, direction)}});
            for (const MethodSpec& m : prompt_methods(cfg)) {
                PromptParams phi = load_prompt(paths.prompt(ds.pair_name(), to_string(direction), m.name));
                rows.push_back({{"pair", ds.pair_name()},
                                {"direction", to_string(direction)},
                                {"method", m.name},
                                {"selection_pct", eval_disambiguation(w, manifest, ds, direction, &phi)}});
            }
        }
    }
    write_json(paths.disambiguation(), rows);
    for (const auto& row : rows)
        std::cout << row["pair"].get<std::string>() << " " << row["direction"].get<std::string>() << " "
                  << row["method"].get<std::string>() << ": " << row["selection_pct"].get<double>() << "\n";
}

inline void eval_downstream_step(const RunConfig& cfg) {
    RunPaths paths(cfg);
    Manifest manifest = read_manifest(paths.manifest());
    BackboneWeights w = load_checkpoint(paths.checkpoint());
    const std::string pair = pair_name(TaskId::object, TaskId::scene_text);
    PairwiseDataset ds = read_pairwise(paths.split(pair));
    GeneratorSpec spec;
    spec.image_size = cfg.image_size;
    nlohmann::json j;
    j["vocabulary_size"] = spec.objects.size();
    j["accuracy_pct"] = nlohmann::json::object();
    j["accuracy_pct"]["no_prompt"] =
        eval_downstream(w, manifest, ds.test, spec.objects, TaskId::object);
    for (const MethodSpec& m : prompt_methods(cfg)) {
        PromptParams phi = load_prompt(paths.prompt(pair, to_string(TaskId::object), m.name));
        j["accuracy_pct"][m.name] = eval_downstream(w, manifest, ds.test, spec.objects, TaskId::object, &phi);
    }
    write_json(paths.downstream(), j);
    std::cout << "downstream object recognition: " << j["accuracy_pct"].dump() << "\n";
}

inline void attn_maps(const RunConfig& cfg) {
    RunPaths paths(cfg);
    Manifest manifest = read_manifest(paths.manifest());
    BackboneWeights w = load_checkpoint(paths.checkpoint());
    const std::string pair = pair_name(TaskId::object, TaskId::scene_text);
    PairwiseDataset ds = read_pairwise(paths.split(pair));
    PromptParams phi_text = load_prompt(paths.prompt(pair, to_string(TaskId::scene_text), "vitp"));
    PromptParams phi_obj = load_prompt(paths.prompt(pair, to_string(TaskId::object), "vitp"));
    std::filesystem::create_directories(paths.attention_dir());

    std::size_t band_dominant = 0;
    nlohmann::json per_image = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
        const std::uint64_t id = ds.test[i];
        const ManifestEntry& e = manifest.by_id(id);
        const std::vector<std::uint8_t> px = load_entry_pixels(manifest, e, cfg.image_size);
        std::vector<double> img(px.size());
        for (std::size_t q = 0; q < px.size(); ++q) img[q] = static_cast<double>(px[q]) / 255.0;

        DiffMap diff = directed_diff_map(w, img, phi_text, phi_obj, "scene_text_minus_object", cfg.rollout_mode(),
                                         cfg.attn_identity_mix);
        RegionDiffStats stats = text_band_stats(diff.values, diff.grid);
        band_dominant += stats.mean_inside > stats.mean_outside;
        per_image.push_back({{"image_id", id},
                             {"mean_inside_text_band", stats.mean_inside},
                             {"mean_outside", stats.mean_outside}});

        if (i < cfg.attn_export_count) {
            ImageEncodeResult enc = encode_image(w, img);
            RolloutMap rmap = attention_rollout(enc.attention, cfg.rollout_mode(), cfg.attn_identity_mix);
            const std::string base = (std::filesystem::path(paths.attention_dir()) /
                                      ("img_" + std::to_string(id))).string();
            overlay_export(img, cfg.image_size, rmap, base + "_rollout.ppm");
            overlay_export(img, cfg.image_size, diff, base + "_diff_text_minus_object.ppm");
            write_json(base + "_diff.json", map_json(diff.values, diff.grid));
        }
    }
    nlohmann::json j;
    j["pair"] = pair;
    j["direction"] = "scene_text_minus_object";
    j["text_band_dominant_fraction"] =
        ds.test.empty() ? 0.0 : static_cast<double>(band_dominant) / static_cast<double>(ds.test.size());
    j["per_image"] = per_image;
    write_json(paths.region_stats(), j);
    std::cout << "text-band dominant fraction: " << j["text_band_dominant_fraction"].get<double>() << "\n";
}

inline void classify_bias(const RunConfig& cfg) {
    RunPaths paths(cfg);
    Manifest manifest = read_manifest(paths.manifest());
    BackboneWeights w = load_checkpoint(paths.checkpoint());
    for (const auto& [a, b] : {std::pair{TaskId::object, TaskId::scene_text}, std::pair{TaskId::action, TaskId::scene_text}}) {
        PairwiseDataset ds = read_pairwise(paths.split(pair_name(a, b)));
        std::vector<BiasScore> train_scores = probe_split(w, manifest, ds, false);
        std::vector<BiasScore> test_scores = probe_split(w, manifest, ds, true);
        BiasDirectionDataset bd = build_bias_direction_dataset(w, manifest, ds, train_scores, test_scores);
        ClassifierConfig mlp_cfg{cfg.cls_mlp_epochs, cfg.cls_batch, cfg.cls_lr, mix_seed(cfg.seed, fnv1a64("mlp"))};
        ClassifierConfig conv_cfg{cfg.cls_conv_epochs, cfg.cls_batch, cfg.cls_lr, mix_seed(cfg.seed, fnv1a64("conv"))};
        BiasClassifierReport report = run_bias_classifiers(bd, mlp_cfg, conv_cfg);
        write_json(paths.classifiers(ds.pair_name()), classifier_report_json(report));
        std::cout << ds.pair_name() << " classifiers: frequent " << report.frequent_train_pct << ", image "
                  << report.image_pct << ", embedding " << report.embedding_pct << "\n";
    }
}

inline void summarize(const RunConfig& cfg) {
    RunPaths paths(cfg);
    nlohmann::json summary;
    summary["disambiguation"] = read_json(paths.disambiguation());
    summary["downstream"] = read_json(paths.downstream());
    summary["region_stats"] = read_json(paths.region_stats());
    for (const auto& [a, b] : task_pairs()) {
        const std::string pair = pair_name(a, b);
        summary["histograms"][pair] = read_json(paths.probe_histogram(pair));
        summary["prefix_deltas"][pair] = read_json(paths.prefix_deltas(pair));
    }
    for (const char* pair : {"object_vs_scene_text", "action_vs_scene_text"})
        summary["bias_classifiers"][pair] = read_json(paths.classifiers(pair));
    {
        std::ifstream metrics(paths.pretrain_metrics());
        std::string line, last;
        while (std::getline(metrics, line))
            if (!line.empty()) last = line;
        if (!last.empty()) summary["pretrain_final"] = nlohmann::json::parse(last);
    }
    write_json(paths.summary(), summary);
    std::cout << "summary written to " << paths.summary() << "\n";
}

inline void run_all(const RunConfig& cfg) {
    gen_data(cfg);
    pretrain(cfg);
    probe(cfg);
    prefix_eval(cfg);
    tune_prompts(cfg);
    eval_disambiguation_step(cfg);
    eval_downstream_step(cfg);
    attn_maps(cfg);
    classify_bias(cfg);
    summarize(cfg);
}

}  // namespace pipeline

}  // namespace taskbias
