#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskbias/prompt.hpp"

namespace taskbias {

// ----------------------------- maps -----------------------------

struct RolloutMap {
    std::size_t grid = 0;        // patches per side
    std::vector<double> values;  // grid*grid, max-normalized
    bool max_normalized = true;
};

struct DiffMap {
    std::size_t grid = 0;
    std::vector<double> values;  // rollout(A) - rollout(B), in [-1, 1]
    std::string direction;       // toward which task
};

enum class RolloutMode { full, final_layer };

// ----------------------------- rollout -----------------------------

// Head-averaged, identity-mixed attention multiplied across layers; the [CLS]
// row restricted to patch columns and max-normalized. identity_mix is the
// residual correction weight on I.
inline RolloutMap attention_rollout(const AttentionRecord& rec, RolloutMode mode = RolloutMode::full,
                                    double identity_mix = 0.5,
                                    std::vector<std::vector<double>>* intermediates = nullptr) {
    if (rec.layers.empty() || rec.tokens == 0) throw DataError("attention record is empty");
    const std::size_t t = rec.tokens, h = rec.heads;
    std::vector<double> product(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i) product[i * t + i] = 1.0;

    const std::size_t first_layer = mode == RolloutMode::final_layer ? rec.layers.size() - 1 : 0;
    std::vector<double> mixed(t * t), next(t * t);
    for (std::size_t layer = first_layer; layer < rec.layers.size(); ++layer) {
        const std::vector<double>& raw = rec.layers[layer];
        if (raw.size() != h * t * t) throw DataError("attention record layer has inconsistent dimensions");
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < t; ++j) {
                double avg = 0.0;
                for (std::size_t head = 0; head < h; ++head) avg += raw[(head * t + i) * t + j];
                avg /= static_cast<double>(h);
                mixed[i * t + j] = (1.0 - identity_mix) * avg + (i == j ? identity_mix : 0.0);
            }
        // renormalize rows to guard against drift
        for (std::size_t i = 0; i < t; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < t; ++j) s += mixed[i * t + j];
            if (s <= 0.0) throw NumericError("rollout row collapsed to zero");
            for (std::size_t j = 0; j < t; ++j) mixed[i * t + j] /= s;
        }
        // product = mixed @ product (later layers multiply on the left)
        std::fill(next.begin(), next.end(), 0.0);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t k = 0; k < t; ++k) {
                const double m = mixed[i * t + k];
                if (m == 0.0) continue;
                for (std::size_t j = 0; j < t; ++j) next[i * t + j] += m * product[k * t + j];
            }
        product.swap(next);
        if (intermediates) intermediates->push_back(product);
    }

    const std::size_t p = rec.layout.patch_count;
    const std::size_t grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(p))));
    if (grid * grid != p) throw DataError("patch count is not a square grid");
    RolloutMap map;
    map.grid = grid;
    map.values.resize(p);
    double mx = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        map.values[i] = product[rec.layout.cls_index * t + rec.layout.patch_start + i];
        mx = std::max(mx, map.values[i]);
    }
    if (mx == 0.0) throw NumericError("rollout map is all zero");
    for (double& v : map.values) v /= mx;
    return map;
}

// ----------------------------- directed difference -----------------------------

inline DiffMap diff_maps(const RolloutMap& a, const RolloutMap& b, std::string direction) {
    if (a.grid != b.grid) throw DataError("rollout maps have different grids");
    DiffMap d;
    d.grid = a.grid;
    d.direction = std::move(direction);
    d.values.resize(a.values.size());
    for (std::size_t i = 0; i < a.values.size(); ++i) d.values[i] = a.values[i] - b.values[i];
    return d;
}

// rollout under phi_a minus rollout under phi_b, both max-normalized first
inline DiffMap directed_diff_map(BackboneWeights& w, std::span<const double> image, const PromptParams& phi_a,
                                 const PromptParams& phi_b, std::string direction = "",
                                 RolloutMode mode = RolloutMode::full, double identity_mix = 0.5) {
    if (!phi_a.backbone_hash.empty() && !phi_b.backbone_hash.empty() && phi_a.backbone_hash != phi_b.backbone_hash)
        throw DataError("prompts were tuned on different backbones (hash mismatch)");
    VisualPrompt va = phi_a.view(), vb = phi_b.view();
    RolloutMap ra = attention_rollout(encode_image(w, image, &va).attention, mode, identity_mix);
    RolloutMap rb = attention_rollout(encode_image(w, image, &vb).attention, mode, identity_mix);
    return diff_maps(ra, rb, std::move(direction));
}

// ----------------------------- region statistics -----------------------------

struct RegionDiffStats {
    double mean_inside = 0.0;   // patches covering the scene-text band
    double mean_outside = 0.0;  // all other patches
};

// the text band spans the top quarter of the image; with the default patch
// size that is exactly the first patch row
inline RegionDiffStats text_band_stats(std::span<const double> values, std::size_t grid) {
    if (values.size() != grid * grid || grid == 0) throw DataError("map does not match its grid");
    const std::size_t band_rows = std::max<std::size_t>(1, grid / 4);
    double in_sum = 0, out_sum = 0;
    std::size_t in_n = 0, out_n = 0;
    for (std::size_t py = 0; py < grid; ++py)
        for (std::size_t px = 0; px < grid; ++px) {
            if (py < band_rows) {
                in_sum += values[py * grid + px];
                ++in_n;
            } else {
                out_sum += values[py * grid + px];
                ++out_n;
            }
        }
    return {in_sum / static_cast<double>(in_n), out_sum / static_cast<double>(out_n)};
}

// ----------------------------- overlays -----------------------------

namespace detail_overlay {
inline std::uint8_t quantize(double v) {
    v = std::min(1.0, std::max(0.0, v));
    return static_cast<std::uint8_t>(std::lround(v * 255.0));
}
}  // namespace detail_overlay

// nearest-neighbor upsample blended 50/50 with the image; rollout maps render
// as gray, diff maps as signed two-channel (positive red, negative blue)
inline std::vector<std::uint8_t> render_overlay(std::span<const double> image, std::size_t image_size,
                                                std::span<const double> map_values, std::size_t grid, bool signed_map) {
    if (image.size() != image_size * image_size * 3) throw DataError("overlay image buffer mismatch");
    if (grid == 0 || image_size % grid != 0) throw DataError("map grid does not divide the image evenly");
    const std::size_t cell = image_size / grid;
    std::vector<std::uint8_t> out(image.size());
    for (std::size_t y = 0; y < image_size; ++y)
        for (std::size_t x = 0; x < image_size; ++x) {
            const double v = map_values[(y / cell) * grid + (x / cell)];
            double overlay[3];
            if (signed_map) {
                overlay[0] = v > 0 ? v : 0.0;
                overlay[1] = 0.0;
                overlay[2] = v < 0 ? -v : 0.0;
            } else {
                overlay[0] = overlay[1] = overlay[2] = v;
            }
            for (std::size_t c = 0; c < 3; ++c) {
                const double blended = 0.5 * image[(y * image_size + x) * 3 + c] + 0.5 * overlay[c];
                out[(y * image_size + x) * 3 + c] = detail_overlay::quantize(blended);
            }
        }
    return out;
}

inline void overlay_export(std::span<const double> image, std::size_t image_size, const RolloutMap& map,
                           const std::string& path) {
    write_ppm(path, image_size, render_overlay(image, image_size, map.values, map.grid, false));
}

inline void overlay_export(std::span<const double> image, std::size_t image_size, const DiffMap& map,
                           const std::string& path) {
    write_ppm(path, image_size, render_overlay(image, image_size, map.values, map.grid, true));
}

inline nlohmann::json map_json(std::span<const double> values, std::size_t grid) {
    nlohmann::json j;
    j["width"] = grid;
    j["height"] = grid;
    j["values"] = std::vector<double>(values.begin(), values.end());
    return j;
}

}  // namespace taskbias
