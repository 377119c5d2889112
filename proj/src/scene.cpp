#include "hydra/scene.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "hydra/rng.hpp"

namespace hydra {

const std::array<std::array<float, 3>, kNumColors> kPalette = {{
    {1.f, 0.f, 0.f},  // red
    {0.f, 1.f, 0.f},  // green
    {0.f, 0.f, 1.f},  // blue
    {1.f, 1.f, 0.f},  // yellow
    {1.f, 0.f, 1.f},  // magenta
    {0.f, 1.f, 1.f},  // cyan
    {1.f, 1.f, 1.f},  // white
    {0.f, 0.f, 0.f},  // black
}};
const std::array<const char*, kNumColors> kColorNames = {
    "red", "green", "blue", "yellow", "magenta", "cyan", "white", "black"};
const std::array<const char*, kNumShapes> kShapeNames = {"circle", "square", "triangle"};
const std::array<float, 3> kDefaultBackground = {0.5f, 0.5f, 0.5f};

namespace {

struct CellBox {
    int x0, x1, y0, y1;  // half-open pixel ranges
    float cx, cy, ext;   // center and shape half-extent
};

CellBox cell_box(int cell, int image_size) {
    const int r = cell / 3, c = cell % 3;
    CellBox b;
    b.x0 = c * image_size / 3;
    b.x1 = (c + 1) * image_size / 3;
    b.y0 = r * image_size / 3;
    b.y1 = (r + 1) * image_size / 3;
    b.cx = 0.5f * float(b.x0 + b.x1);
    b.cy = 0.5f * float(b.y0 + b.y1);
    b.ext = 0.40f * float(std::min(b.x1 - b.x0, b.y1 - b.y0));
    return b;
}

bool inside_shape(int shape, float dx, float dy, float ext) {
    switch (shape) {
        case 0:  // circle
            return dx * dx + dy * dy <= ext * ext;
        case 1: {  // square, slightly shrunk so it reads differently from the circle
            const float e = 0.85f * ext;
            return std::fabs(dx) <= e && std::fabs(dy) <= e;
        }
        default: {  // upward triangle, apex at the top
            if (std::fabs(dy) > ext) return false;
            return std::fabs(dx) <= 0.5f * (dy + ext);
        }
    }
}

void paint_cell(Image& img, const CellBox& b, int shape, const std::array<float, 3>& rgb,
                int image_size) {
    float* data = img.ptr();
    for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x) {
            const float dx = float(x) + 0.5f - b.cx;
            const float dy = float(y) + 0.5f - b.cy;
            if (!inside_shape(shape, dx, dy, b.ext)) continue;
            float* px = data + (int64_t(y) * image_size + x) * 3;
            px[0] = rgb[0];
            px[1] = rgb[1];
            px[2] = rgb[2];
        }
}

}  // namespace

Image render(const SceneSpec& scene, int image_size) {
    Image img({image_size, image_size, 3});
    float* data = img.ptr();
    for (int64_t p = 0; p < int64_t(image_size) * image_size; ++p) {
        data[p * 3 + 0] = scene.background[0];
        data[p * 3 + 1] = scene.background[1];
        data[p * 3 + 2] = scene.background[2];
    }
    for (const auto& obj : scene.objects)
        paint_cell(img, cell_box(obj.cell, image_size), obj.shape, kPalette[obj.color],
                   image_size);
    return img;
}

const Vocabulary& Vocabulary::standard() {
    static const Vocabulary vocab = [] {
        Vocabulary v;
        const char* words[] = {
            "<pad>", "<bos>", "<eos>", "<img>", "</img>",
            "a", "and", "in", "the", "what", "color", "is", "?",
            "red", "green", "blue", "yellow", "magenta", "cyan", "white", "black",
            "circle", "square", "triangle",
            "top", "middle", "bottom", "left", "center", "right",
        };
        for (const char* w : words) {
            v.ids.emplace(w, int(v.tokens.size()));
            v.tokens.emplace_back(w);
        }
        v.pad = v.ids.at("<pad>");
        v.bos = v.ids.at("<bos>");
        v.eos = v.ids.at("<eos>");
        v.img_start = v.ids.at("<img>");
        v.img_end = v.ids.at("</img>");
        return v;
    }();
    return vocab;
}

int Vocabulary::id(const std::string& tok) const {
    auto it = ids.find(tok);
    if (it == ids.end()) throw std::invalid_argument("unknown token: '" + tok + "'");
    return it->second;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
    std::vector<int> out;
    std::istringstream ss(text);
    std::string tok;
    while (ss >> tok) out.push_back(id(tok));
    return out;
}

std::string Vocabulary::decode(const std::vector<int>& seq) const {
    std::string out;
    for (size_t i = 0; i < seq.size(); ++i) {
        if (seq[i] < 0 || seq[i] >= size())
            throw std::invalid_argument("token id out of range: " + std::to_string(seq[i]));
        if (i) out += ' ';
        out += tokens[seq[i]];
    }
    return out;
}

std::string cell_name(int cell) {
    static const char* rows[] = {"top", "middle", "bottom"};
    static const char* cols[] = {"left", "center", "right"};
    return std::string(rows[cell / 3]) + " " + cols[cell % 3];
}

std::vector<int> caption_tokens(const SceneSpec& scene) {
    static const char* rows[] = {"top", "middle", "bottom"};
    static const char* cols[] = {"left", "center", "right"};
    const auto& v = Vocabulary::standard();
    std::vector<int> out;
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& obj = scene.objects[i];
        if (i) out.push_back(v.id("and"));
        out.push_back(v.id("a"));
        out.push_back(v.id(kColorNames[obj.color]));
        out.push_back(v.id(kShapeNames[obj.shape]));
        out.push_back(v.id("in"));
        out.push_back(v.id("the"));
        out.push_back(v.id(rows[obj.cell / 3]));
        out.push_back(v.id(cols[obj.cell % 3]));
    }
    return out;
}

std::vector<QaPair> qa_pairs(const SceneSpec& scene) {
    const auto& v = Vocabulary::standard();
    std::vector<QaPair> out;
    for (const auto& obj : scene.objects) {
        QaPair p;
        p.question = {v.id("what"), v.id("color"), v.id("is"), v.id("the"),
                      v.id(kShapeNames[obj.shape]), v.id("?")};
        p.answer = {v.id(kColorNames[obj.color])};
        out.push_back(std::move(p));
    }
    return out;
}

SceneSpec generate_scene_spec(uint64_t seed, Difficulty difficulty) {
    Rng rng(seed, /*stream=*/0x5CE11E);
    SceneSpec scene;
    scene.seed = seed;
    const int n = difficulty == Difficulty::Single ? 1 : 2 + int(rng.below(2));

    // Distinct shapes (so per-shape QA stays unambiguous) and distinct cells.
    int shapes[kNumShapes] = {0, 1, 2};
    for (int i = kNumShapes - 1; i > 0; --i)
        std::swap(shapes[i], shapes[rng.below(uint64_t(i) + 1)]);
    int cells[kGridCells];
    for (int i = 0; i < kGridCells; ++i) cells[i] = i;
    for (int i = kGridCells - 1; i > 0; --i)
        std::swap(cells[i], cells[rng.below(uint64_t(i) + 1)]);

    for (int i = 0; i < n; ++i) {
        SceneObject obj;
        obj.shape = shapes[i];
        obj.color = int(rng.below(kNumColors));
        obj.cell = cells[i];
        scene.objects.push_back(obj);
    }
    return scene;
}

CorpusRecord generate_scene(uint64_t seed, Difficulty difficulty, int image_size) {
    CorpusRecord rec;
    rec.scene = generate_scene_spec(seed, difficulty);
    rec.image = render(rec.scene, image_size);
    rec.caption = caption_tokens(rec.scene);
    rec.qa = qa_pairs(rec.scene);
    return rec;
}

namespace {

double cell_mse(const Image& img, const CellBox& b, int image_size,
                const std::array<float, 3>& bg, int shape, const std::array<float, 3>& fg) {
    // shape < 0 means flat background.
    double s = 0.0;
    int n = 0;
    for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x) {
            const float dx = float(x) + 0.5f - b.cx;
            const float dy = float(y) + 0.5f - b.cy;
            const bool in = shape >= 0 && inside_shape(shape, dx, dy, b.ext);
            const float* want = in ? fg.data() : bg.data();
            const float* got = img.ptr() + (int64_t(y) * image_size + x) * 3;
            for (int c = 0; c < 3; ++c) {
                const double d = double(got[c]) - double(want[c]);
                s += d * d;
            }
            n += 3;
        }
    return s / double(n);
}

struct CellClass {
    bool object = false;
    int shape = -1;
    int color = -1;
};

CellClass classify_cell(const Image& img, int cell, int image_size,
                        const std::array<float, 3>& bg) {
    const CellBox b = cell_box(cell, image_size);
    CellClass best;
    double best_mse = cell_mse(img, b, image_size, bg, -1, bg);
    for (int s = 0; s < kNumShapes; ++s)
        for (int c = 0; c < kNumColors; ++c) {
            const double m = cell_mse(img, b, image_size, bg, s, kPalette[c]);
            if (m < best_mse) {
                best_mse = m;
                best = {true, s, c};
            }
        }
    return best;
}

}  // namespace

AttributeCheck verify_image_against_prompt(const Image& image, const SceneSpec& scene) {
    if (image.shape.size() != 3 || image.shape[0] != image.shape[1] || image.shape[2] != 3)
        throw std::invalid_argument("verify: image must be HxWx3 with H==W, got " +
                                    shape_str(image.shape));
    const int size = int(image.shape[0]);

    CellClass cls[kGridCells];
    int found = 0;
    for (int cell = 0; cell < kGridCells; ++cell) {
        cls[cell] = classify_cell(image, cell, size, scene.background);
        if (cls[cell].object) ++found;
    }

    AttributeCheck out;
    out.count = found == int(scene.objects.size());
    out.shape = out.color = out.position = true;
    for (const auto& obj : scene.objects) {
        const CellClass& c = cls[obj.cell];
        out.position = out.position && c.object;
        out.shape = out.shape && c.object && c.shape == obj.shape;
        out.color = out.color && c.object && c.color == obj.color;
    }
    return out;
}

}  // namespace hydra
