#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "taskbias/common.hpp"
#include "taskbias/tokenizer.hpp"

namespace taskbias {

// ----------------------------- tasks -----------------------------

enum class TaskId { object = 0, action = 1, scene_text = 2 };

constexpr std::array<TaskId, 3> kAllTasks{TaskId::object, TaskId::action, TaskId::scene_text};

inline std::string to_string(TaskId t) {
    switch (t) {
        case TaskId::object: return "object";
        case TaskId::action: return "action";
        case TaskId::scene_text: return "scene_text";
    }
    throw DataError("unknown task id");
}

inline TaskId task_from_string(const std::string& s) {
    for (TaskId t : kAllTasks)
        if (to_string(t) == s) return t;
    throw DataError("unknown task '" + s + "'");
}

using Labels = std::array<std::string, 3>;  // indexed by TaskId

inline const std::string& label_for(const Labels& l, TaskId t) { return l[static_cast<std::size_t>(t)]; }

// options are prefixed with this string in probes and during caption wrapping
inline constexpr std::string_view kUniformPrefix = "This is a photo of a";

// ----------------------------- vocabularies -----------------------------

struct GeneratorSpec {
    std::size_t image_size = 32;
    std::vector<std::string> objects = {"circle", "square",  "triangle", "diamond", "cross",  "ring",
                                        "arch",   "hexagon", "wedge",    "plusbar", "bowtie", "ladder"};
    std::vector<std::string> actions = {"lift", "push", "pull", "spin", "drop", "wave", "kick", "slide"};
    std::vector<std::string> texts = {"exit", "sale", "stop", "note", "menu", "open", "taxi", "cafe", "gold", "rain",
                                      "snow", "fire", "wind", "moon", "star", "book", "door", "milk", "fish", "beer"};

    const std::vector<std::string>& vocabulary(TaskId t) const {
        switch (t) {
            case TaskId::object: return objects;
            case TaskId::action: return actions;
            case TaskId::scene_text: return texts;
        }
        throw DataError("unknown task id");
    }

    void validate() const {
        if (image_size % 32 != 0 || image_size == 0) throw DataError("generator image_size must be a multiple of 32");
        if (objects.empty() || actions.empty() || texts.empty()) throw DataError("task vocabulary is empty");
        std::map<std::string, int> seen;
        for (TaskId t : kAllTasks)
            for (const std::string& s : vocabulary(t)) {
                if (++seen[s] > 1) throw DataError("label '" + s + "' appears in more than one task vocabulary");
                for (char c : s) (void)char_token(c);  // must be tokenizable
            }
    }
};

// ----------------------------- caption policy -----------------------------

enum class CaptionPolicyKind { uniform, skewed, content_hashed };

struct CaptionPolicy {
    CaptionPolicyKind kind = CaptionPolicyKind::content_hashed;
    double p_object = 1.0 / 3.0;
    double p_action = 1.0 / 3.0;
    double p_text = 1.0 / 3.0;

    void validate() const {
        if (kind != CaptionPolicyKind::skewed) return;
        const double s = p_object + p_action + p_text;
        if (std::abs(s - 1.0) > 1e-9 || p_object < 0 || p_action < 0 || p_text < 0)
            throw DataError("skewed caption policy probabilities must be non-negative and sum to 1");
    }

    std::string str() const {
        switch (kind) {
            case CaptionPolicyKind::uniform: return "uniform";
            case CaptionPolicyKind::content_hashed: return "content_hashed";
            case CaptionPolicyKind::skewed: {
                std::ostringstream os;
                os << "skewed(" << p_object << "," << p_action << "," << p_text << ")";
                return os.str();
            }
        }
        throw DataError("unknown caption policy");
    }

    static CaptionPolicy parse(const std::string& s) {
        CaptionPolicy p;
        if (s == "uniform") {
            p.kind = CaptionPolicyKind::uniform;
            return p;
        }
        if (s == "content_hashed") {
            p.kind = CaptionPolicyKind::content_hashed;
            return p;
        }
        if (s.rfind("skewed(", 0) == 0 && s.back() == ')') {
            p.kind = CaptionPolicyKind::skewed;
            const std::string body = s.substr(7, s.size() - 8);
            std::istringstream is(body);
            char c1, c2;
            if (!(is >> p.p_object >> c1 >> p.p_action >> c2 >> p.p_text) || c1 != ',' || c2 != ',')
                throw DataError("cannot parse caption policy '" + s + "'");
            p.validate();
            return p;
        }
        throw DataError("unknown caption policy '" + s + "'");
    }
};

// the task whose label becomes the caption
inline TaskId sample_caption_task(const CaptionPolicy& policy, std::uint64_t image_id, Rng& rng) {
    policy.validate();
    switch (policy.kind) {
        case CaptionPolicyKind::uniform: {
            const double u = rng.uniform();
            return u < 1.0 / 3.0 ? TaskId::object : (u < 2.0 / 3.0 ? TaskId::action : TaskId::scene_text);
        }
        case CaptionPolicyKind::skewed: {
            const double u = rng.uniform();
            if (u < policy.p_object) return TaskId::object;
            if (u < policy.p_object + policy.p_action) return TaskId::action;
            return TaskId::scene_text;
        }
        case CaptionPolicyKind::content_hashed:
            // depends on the image id alone, never on the run seed
            return static_cast<TaskId>(fnv1a64_u64(image_id) % 3);
    }
    throw DataError("unknown caption policy");
}

inline std::string wrap_caption(const std::string& label) { return std::string(kUniformPrefix) + " " + label; }

inline std::string sample_caption(const Labels& labels, const CaptionPolicy& policy, std::uint64_t image_id, Rng& rng,
                                  bool wrap) {
    const TaskId t = sample_caption_task(policy, image_id, rng);
    const std::string& label = label_for(labels, t);
    return wrap ? wrap_caption(label) : label;
}

// ----------------------------- placement regions -----------------------------
// Three disjoint regions: text band across the top, object box in the middle,
// action motif everywhere else. Patch row 0 of an 8px grid covers the band
// exactly, which keeps attention-map claims checkable against ground truth.

inline bool in_text_band(std::size_t image_size, std::size_t y, std::size_t) { return y < image_size / 4; }

inline bool in_object_box(std::size_t image_size, std::size_t y, std::size_t x) {
    const std::size_t y0 = image_size * 11 / 32, y1 = image_size * 27 / 32;
    const std::size_t x0 = image_size / 4, x1 = image_size * 3 / 4;
    return y >= y0 && y < y1 && x >= x0 && x < x1;
}

inline bool in_action_region(std::size_t image_size, std::size_t y, std::size_t x) {
    return !in_text_band(image_size, y, x) && !in_object_box(image_size, y, x);
}

// ----------------------------- 5x7 bitmap font -----------------------------

namespace detail_font {
// bit 4 is the leftmost column
inline const std::uint8_t* glyph(char c) {
    static const std::uint8_t rows[26][7] = {
        {0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11},  // a
        {0x1e, 0x11, 0x1e, 0x11, 0x11, 0x11, 0x1e},  // b
        {0x0f, 0x10, 0x10, 0x10, 0x10, 0x10, 0x0f},  // c
        {0x1e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1e},  // d
        {0x1f, 0x10, 0x1e, 0x10, 0x10, 0x10, 0x1f},  // e
        {0x1f, 0x10, 0x1e, 0x10, 0x10, 0x10, 0x10},  // f
        {0x0f, 0x10, 0x10, 0x17, 0x11, 0x11, 0x0e},  // g
        {0x11, 0x11, 0x1f, 0x11, 0x11, 0x11, 0x11},  // h
        {0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e},  // i
        {0x01, 0x01, 0x01, 0x01, 0x11, 0x11, 0x0e},  // j
        {0x11, 0x12, 0x1c, 0x12, 0x11, 0x11, 0x11},  // k
        {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1f},  // l
        {0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11},  // m
        {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11},  // n
        {0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e},  // o
        {0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10},  // p
        {0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d},  // q
        {0x1e, 0x11, 0x11, 0x1e, 0x12, 0x11, 0x11},  // r
        {0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e},  // s
        {0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04},  // t
        {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e},  // u
        {0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04},  // v
        {0x11, 0x11, 0x11, 0x15, 0x15, 0x1b, 0x11},  // w
        {0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11},  // x
        {0x11, 0x11, 0x0a, 0x04, 0x04, 0x04, 0x04},  // y
        {0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f},  // z
    };
    if (c < 'a' || c > 'z') throw DataError(std::string("no glyph for character '") + c + "'");
    return rows[c - 'a'];
}
}  // namespace detail_font

// ----------------------------- example -----------------------------

struct MultiTaskExample {
    std::uint64_t id = 0;
    std::uint64_t seed = 0;
    Labels labels;
    std::string caption;
    std::vector<std::uint8_t> pixels;  // [S, S, 3] row-major, 8-bit
    std::size_t image_size = 32;

    std::vector<double> image() const {
        std::vector<double> out(pixels.size());
        for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = static_cast<double>(pixels[i]) / 255.0;
        return out;
    }
};

namespace detail_render {

struct Canvas {
    std::size_t size;
    std::vector<double> rgb;  // [S,S,3]

    Canvas(std::size_t s, double r, double g, double b) : size(s), rgb(s * s * 3) {
        for (std::size_t i = 0; i < s * s; ++i) {
            rgb[i * 3] = r;
            rgb[i * 3 + 1] = g;
            rgb[i * 3 + 2] = b;
        }
    }

    void set(std::size_t y, std::size_t x, double r, double g, double b) {
        const std::size_t at = (y * size + x) * 3;
        rgb[at] = r;
        rgb[at + 1] = g;
        rgb[at + 2] = b;
    }
};

// Bold strokes: every font pixel also fills its right neighbor. The pitch
// matches the 8px patch grid so each character sits inside a single patch.
inline void draw_text_band(Canvas& cv, const std::string& word, double r, double g, double b) {
    const std::size_t scale = cv.size / 32;
    const std::size_t pitch = 8 * scale;
    const std::size_t x0 = scale;  // one pixel of margin inside the first patch
    const std::size_t y0 = scale;  // one scaled row of margin inside the band
    for (std::size_t ci = 0; ci < word.size(); ++ci) {
        const std::uint8_t* rows = detail_font::glyph(word[ci]);
        for (std::size_t ry = 0; ry < 7; ++ry)
            for (std::size_t rx = 0; rx < 6; ++rx) {
                const bool on = (rx < 5 && ((rows[ry] >> (4 - rx)) & 1)) || (rx > 0 && ((rows[ry] >> (5 - rx)) & 1));
                if (!on) continue;
                for (std::size_t sy = 0; sy < scale; ++sy)
                    for (std::size_t sx = 0; sx < scale; ++sx) {
                        const std::size_t y = y0 + ry * scale + sy;
                        const std::size_t x = x0 + ci * pitch + rx * scale + sx;
                        if (y < cv.size / 4 && x < cv.size) cv.set(y, x, r, g, b);
                    }
            }
    }
}

// glyph shapes on a 12x12 unit grid, index matches GeneratorSpec::objects
inline bool object_mask(std::size_t shape, double y, double x) {
    const double cy = y - 5.5, cx = x - 5.5;
    const double d2 = cy * cy + cx * cx;
    switch (shape) {
        case 0: return d2 <= 30.0;                                                   // circle
        case 1: return std::abs(cy) <= 4.5 && std::abs(cx) <= 4.5;                   // square
        case 2: return y >= 1 && std::abs(cx) <= (y - 1) * 0.5 && y <= 10.5;         // triangle
        case 3: return std::abs(cy) + std::abs(cx) <= 5.5;                           // diamond
        case 4: return std::abs(std::abs(cy) - std::abs(cx)) <= 1.2;                 // cross (x shape)
        case 5: return d2 <= 30.0 && d2 >= 12.0;                                     // ring
        case 6: return (d2 <= 30.0 && d2 >= 12.0 && y <= 5.5) || (y > 5.5 && y <= 10.5 && (std::abs(x - 1.5) <= 1.0 || std::abs(x - 9.5) <= 1.0));  // arch
        case 7: return std::abs(cy) <= 5.0 && std::abs(cx) <= 5.5 - std::abs(cy) * 0.5;  // hexagon
        case 8: return x >= 1 && y >= 1 && x <= y;                                   // wedge
        case 9: return std::abs(cy) <= 1.5 || std::abs(cx) <= 1.5;                   // plusbar
        case 10: return std::abs(cy) <= std::abs(cx) && std::abs(cx) <= 5.0;         // bowtie
        case 11: {                                                                   // ladder
            const bool rail = std::abs(cx - 3.5) <= 0.8 || std::abs(cx + 3.5) <= 0.8;
            const bool rung = std::abs(cx) <= 3.5 && (static_cast<int>(y) % 3 == 1);
            return rail || rung;
        }
    }
    return false;
}

// oriented stroke patterns keyed by action index, absolute image coordinates
inline bool action_mask(std::size_t action, std::size_t y, std::size_t x, std::size_t s) {
    const std::size_t u = y * 32 / s, v = x * 32 / s;  // normalize to the 32-grid
    switch (action % 8) {
        case 0: return v % 4 == 0;                            // lift: vertical strokes
        case 1: return u % 4 == 0;                            // push: horizontal strokes
        case 2: return (u + v) % 5 == 0;                      // pull: diagonal
        case 3: {                                             // spin: concentric rings
            const double dy = static_cast<double>(u) - 16.0, dx = static_cast<double>(v) - 16.0;
            return (static_cast<int>(std::sqrt(dy * dy + dx * dx)) % 4) == 0;
        }
        case 4: return v % 4 == 0 && u % 3 != 2;              // drop: dashed verticals
        case 5: return u % 6 == (v / 2) % 6;                  // wave
        case 6: return (u + 2 * (31 - v)) % 7 == 0;           // kick: steep anti-diagonal
        case 7: return (u + 2 * v) % 7 == 0;                  // slide: steep diagonal
    }
    return false;
}

inline std::array<double, 3> object_palette(std::size_t i) {
    static const std::array<double, 3> colors[12] = {
        {0.85, 0.30, 0.25}, {0.25, 0.70, 0.85}, {0.85, 0.75, 0.25}, {0.55, 0.30, 0.80},
        {0.30, 0.80, 0.40}, {0.85, 0.45, 0.65}, {0.40, 0.55, 0.85}, {0.80, 0.55, 0.25},
        {0.35, 0.80, 0.70}, {0.70, 0.80, 0.30}, {0.80, 0.30, 0.45}, {0.45, 0.75, 0.30},
    };
    return colors[i % 12];
}

inline std::array<double, 3> action_palette(std::size_t i) {
    static const std::array<double, 3> colors[8] = {
        {0.55, 0.45, 0.30}, {0.30, 0.45, 0.55}, {0.50, 0.35, 0.50}, {0.35, 0.55, 0.35},
        {0.55, 0.35, 0.35}, {0.35, 0.35, 0.55}, {0.50, 0.50, 0.30}, {0.30, 0.50, 0.50},
    };
    return colors[i % 8];
}

}  // namespace detail_render

struct LabelChoice {
    std::size_t object = 0, action = 0, text = 0;
};

inline LabelChoice sample_label_choice(const GeneratorSpec& spec, std::uint64_t example_seed) {
    Rng rng(mix_seed(example_seed, fnv1a64("labels")));
    LabelChoice c;
    c.object = rng.uniform_int(spec.objects.size());
    c.action = rng.uniform_int(spec.actions.size());
    c.text = rng.uniform_int(spec.texts.size());
    return c;
}

// Deterministic renderer: the full image is a function of (spec, seed, choice).
// Values are kept strictly inside (0, 1) before 8-bit quantization so that a
// zero pixel prompt stays an exact identity.
inline std::vector<std::uint8_t> render_pixels(const GeneratorSpec& spec, std::uint64_t example_seed,
                                               const LabelChoice& choice) {
    const std::size_t s = spec.image_size;
    Rng bg_rng(mix_seed(example_seed, fnv1a64("background")));
    Rng obj_rng(mix_seed(example_seed, fnv1a64("object")));
    Rng act_rng(mix_seed(example_seed, fnv1a64("action")));
    Rng txt_rng(mix_seed(example_seed, fnv1a64("text")));
    Rng noise_rng(mix_seed(example_seed, fnv1a64("noise")));

    detail_render::Canvas cv(s, 0.10 + 0.05 * bg_rng.uniform(), 0.10 + 0.05 * bg_rng.uniform(),
                             0.10 + 0.05 * bg_rng.uniform());

    // darker band backdrop and a lighter object box keep each region salient
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
            const std::size_t at = (y * s + x) * 3;
            if (in_text_band(s, y, x))
                for (std::size_t c = 0; c < 3; ++c) cv.rgb[at + c] *= 0.55;
            else if (in_object_box(s, y, x))
                for (std::size_t c = 0; c < 3; ++c) cv.rgb[at + c] *= 1.8;
        }

    // action motif fills the background region
    auto act_color = detail_render::action_palette(choice.action);
    for (auto& c : act_color) c += 0.06 * (act_rng.uniform() - 0.5);
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x)
            if (in_action_region(s, y, x) && detail_render::action_mask(choice.action, y, x, s))
                cv.set(y, x, act_color[0], act_color[1], act_color[2]);

    // object glyph inside the object box, with position jitter
    auto obj_color = detail_render::object_palette(choice.object);
    for (auto& c : obj_color) c += 0.06 * (obj_rng.uniform() - 0.5);
    const std::size_t scale = s / 32;
    const long jx = static_cast<long>(obj_rng.uniform_int(5)) - 2;
    const long jy = static_cast<long>(obj_rng.uniform_int(5)) - 2;
    const long oy0 = static_cast<long>(s * 11 / 32) + (2 * static_cast<long>(scale)) + jy * static_cast<long>(scale);
    const long ox0 = static_cast<long>(s / 4) + (2 * static_cast<long>(scale)) + jx * static_cast<long>(scale);
    for (std::size_t gy = 0; gy < 12 * scale; ++gy)
        for (std::size_t gx = 0; gx < 12 * scale; ++gx) {
            const double uy = static_cast<double>(gy) / static_cast<double>(scale);
            const double ux = static_cast<double>(gx) / static_cast<double>(scale);
            if (!detail_render::object_mask(choice.object, uy, ux)) continue;
            const long y = oy0 + static_cast<long>(gy), x = ox0 + static_cast<long>(gx);
            if (y < 0 || x < 0) continue;
            if (!in_object_box(s, static_cast<std::size_t>(y), static_cast<std::size_t>(x))) continue;
            cv.set(static_cast<std::size_t>(y), static_cast<std::size_t>(x), obj_color[0], obj_color[1], obj_color[2]);
        }

    // scene text across the band
    const double tr = 0.88 + 0.06 * txt_rng.uniform();
    detail_render::draw_text_band(cv, spec.texts[choice.text], tr, tr, tr * 0.95);

    // light deterministic texture everywhere
    std::vector<std::uint8_t> out(s * s * 3);
    for (std::size_t i = 0; i < out.size(); ++i) {
        double v = cv.rgb[i] + 0.015 * (noise_rng.uniform() - 0.5);
        v = std::min(0.95, std::max(0.05, v));
        out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

// test hook: regenerate with one label overridden
inline MultiTaskExample render_example_with_choice(const GeneratorSpec& spec, std::uint64_t id,
                                                   std::uint64_t example_seed, const LabelChoice& choice) {
    spec.validate();
    MultiTaskExample ex;
    ex.id = id;
    ex.seed = example_seed;
    ex.image_size = spec.image_size;
    ex.labels[0] = spec.objects[choice.object];
    ex.labels[1] = spec.actions[choice.action];
    ex.labels[2] = spec.texts[choice.text];
    ex.pixels = render_pixels(spec, example_seed, choice);
    return ex;
}

inline MultiTaskExample render_example(const GeneratorSpec& spec, std::uint64_t id, std::uint64_t example_seed) {
    return render_example_with_choice(spec, id, example_seed, sample_label_choice(spec, example_seed));
}

// ----------------------------- ppm io -----------------------------

inline void write_ppm(const std::string& path, std::size_t size, const std::vector<std::uint8_t>& rgb) {
    if (rgb.size() != size * size * 3) throw DataError("ppm buffer does not match image size");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << "P6\n" << size << " " << size << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!out) throw DataError("failed writing '" + path + "'");
}

inline std::vector<std::uint8_t> read_ppm(const std::string& path, std::size_t expect_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("image not found: '" + path + "'");
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255) throw DataError("'" + path + "' is not an 8-bit P6 portable pixmap");
    if (w != expect_size || h != expect_size) throw DataError("'" + path + "' has unexpected dimensions");
    in.get();  // single whitespace after the header
    std::vector<std::uint8_t> rgb(w * h * 3);
    in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!in) throw DataError("truncated pixmap '" + path + "'");
    return rgb;
}

// ----------------------------- manifest -----------------------------

struct ManifestEntry {
    std::uint64_t id = 0;
    std::uint64_t seed = 0;
    std::string image_path;
    Labels labels;
    std::string caption;
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    std::string root_dir;  // directory the image paths are relative to

    const ManifestEntry& by_id(std::uint64_t id) const {
        for (const auto& e : entries)
            if (e.id == id) return e;
        throw DataError("manifest has no example with id " + std::to_string(id));
    }
};

inline void write_manifest(const std::string& path, const Manifest& manifest) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    for (const auto& e : manifest.entries) {
        nlohmann::json j;
        j["id"] = e.id;
        j["seed"] = e.seed;
        j["image_path"] = e.image_path;
        j["labels"] = {{"object", e.labels[0]}, {"action", e.labels[1]}, {"scene_text", e.labels[2]}};
        j["caption"] = e.caption;
        out << j.dump() << "\n";
    }
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("manifest not found: '" + path + "'");
    Manifest m;
    m.root_dir = std::filesystem::path(path).parent_path().string();
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw DataError("manifest line " + std::to_string(line_no) + " is not valid JSON");
        ManifestEntry e;
        e.id = j.at("id").get<std::uint64_t>();
        e.seed = j.at("seed").get<std::uint64_t>();
        e.image_path = j.at("image_path").get<std::string>();
        e.labels[0] = j.at("labels").at("object").get<std::string>();
        e.labels[1] = j.at("labels").at("action").get<std::string>();
        e.labels[2] = j.at("labels").at("scene_text").get<std::string>();
        e.caption = j.at("caption").get<std::string>();
        m.entries.push_back(std::move(e));
    }
    return m;
}

struct CorpusConfig {
    GeneratorSpec generator;
    CaptionPolicy policy;
    bool wrap_captions = true;
    std::size_t count = 4096;
};

// Renders the corpus under dir/images and writes dir/manifest.jsonl.
inline Manifest generate_corpus(const CorpusConfig& cfg, std::uint64_t seed, const std::string& dir) {
    cfg.generator.validate();
    cfg.policy.validate();
    std::filesystem::create_directories(std::filesystem::path(dir) / "images");
    Manifest manifest;
    manifest.root_dir = dir;
    for (std::uint64_t id = 0; id < cfg.count; ++id) {
        const std::uint64_t ex_seed = mix_seed(seed, id);
        MultiTaskExample ex = render_example(cfg.generator, id, ex_seed);
        Rng caption_rng(mix_seed(ex_seed, fnv1a64("caption")));
        ex.caption = sample_caption(ex.labels, cfg.policy, id, caption_rng, cfg.wrap_captions);

        char name[32];
        std::snprintf(name, sizeof(name), "images/img_%06llu.ppm", static_cast<unsigned long long>(id));
        write_ppm((std::filesystem::path(dir) / name).string(), cfg.generator.image_size, ex.pixels);

        ManifestEntry e;
        e.id = ex.id;
        e.seed = ex.seed;
        e.image_path = name;
        e.labels = ex.labels;
        e.caption = ex.caption;
        manifest.entries.push_back(std::move(e));
    }
    write_manifest((std::filesystem::path(dir) / "manifest.jsonl").string(), manifest);
    return manifest;
}

inline std::vector<std::uint8_t> load_entry_pixels(const Manifest& m, const ManifestEntry& e, std::size_t image_size) {
    return read_ppm((std::filesystem::path(m.root_dir) / e.image_path).string(), image_size);
}

// ----------------------------- pairwise datasets -----------------------------

struct PairwiseDataset {
    TaskId task_a = TaskId::object;
    TaskId task_b = TaskId::scene_text;
    std::vector<std::uint64_t> train;
    std::vector<std::uint64_t> test;
    double fraction = 0.9;

    std::string pair_name() const { return to_string(task_a) + "_vs_" + to_string(task_b); }
};

// Balance both tasks' label marginals by downsampling, then split.
inline PairwiseDataset build_pairwise_dataset(const Manifest& manifest, TaskId task_a, TaskId task_b,
                                              double fraction = 0.9, std::uint64_t seed = 0) {
    if (manifest.entries.size() < 10) throw DataError("manifest too small to build a pairwise dataset");
    if (task_a == task_b) throw DataError("pairwise dataset needs two distinct tasks");
    if (fraction <= 0.0 || fraction >= 1.0) throw DataError("split fraction must lie strictly between 0 and 1");

    std::vector<const ManifestEntry*> kept;
    kept.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) kept.push_back(&e);

    // iteratively drop the most frequent labels (largest ids first) until the
    // max/min label-count ratio is at most 2 for both tasks
    auto counts_for = [&](TaskId t) {
        std::map<std::string, std::size_t> counts;
        for (const ManifestEntry* e : kept) counts[label_for(e->labels, t)]++;
        return counts;
    };
    for (bool changed = true; changed;) {
        changed = false;
        for (TaskId t : {task_a, task_b}) {
            auto counts = counts_for(t);
            std::size_t min_count = kept.size();
            for (const auto& [label, c] : counts) min_count = std::min(min_count, c);
            for (const auto& [label, c] : counts) {
                if (c <= 2 * min_count) continue;
                std::size_t to_drop = c - 2 * min_count;
                for (auto it = kept.rbegin(); it != kept.rend() && to_drop > 0;) {
                    if (label_for((*it)->labels, t) == label) {
                        it = decltype(it)(kept.erase(std::next(it).base()));
                        --to_drop;
                        changed = true;
                    } else {
                        ++it;
                    }
                }
            }
        }
    }

    std::vector<std::uint64_t> ids;
    ids.reserve(kept.size());
    for (const ManifestEntry* e : kept) ids.push_back(e->id);
    Rng rng(mix_seed(seed, fnv1a64("pairwise-split") ^ fnv1a64(to_string(task_a) + to_string(task_b))));
    rng.shuffle(ids);

    PairwiseDataset ds;
    ds.task_a = task_a;
    ds.task_b = task_b;
    ds.fraction = fraction;
    const std::size_t n_train = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ids.size()) + 0.5));
    ds.train.assign(ids.begin(), ids.begin() + static_cast<long>(n_train));
    ds.test.assign(ids.begin() + static_cast<long>(n_train), ids.end());
    std::sort(ds.train.begin(), ds.train.end());
    std::sort(ds.test.begin(), ds.test.end());
    return ds;
}

inline void write_pairwise(const std::string& path, const PairwiseDataset& ds) {
    nlohmann::json j;
    j["task_a"] = to_string(ds.task_a);
    j["task_b"] = to_string(ds.task_b);
    j["fraction"] = ds.fraction;
    j["train"] = ds.train;
    j["test"] = ds.test;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
}

inline PairwiseDataset read_pairwise(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("pairwise dataset not found: '" + path + "'");
    nlohmann::json j;
    in >> j;
    PairwiseDataset ds;
    ds.task_a = task_from_string(j.at("task_a").get<std::string>());
    ds.task_b = task_from_string(j.at("task_b").get<std::string>());
    ds.fraction = j.at("fraction").get<double>();
    ds.train = j.at("train").get<std::vector<std::uint64_t>>();
    ds.test = j.at("test").get<std::vector<std::uint64_t>>();
    return ds;
}

}  // namespace taskbias
