#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "hydra/tensor.hpp"

namespace hydra {

using Image = Tensor<float>;  // shape {H, W, 3}, values in [0,1]

enum class Difficulty { Single, Multi };

inline constexpr int kNumShapes = 3;   // circle, square, triangle
inline constexpr int kNumColors = 8;   // maximally separated: RGB cube corners
inline constexpr int kGridCells = 9;   // 3x3 placement grid

extern const std::array<std::array<float, 3>, kNumColors> kPalette;
extern const std::array<const char*, kNumColors> kColorNames;
extern const std::array<const char*, kNumShapes> kShapeNames;
extern const std::array<float, 3> kDefaultBackground;  // mid grey

struct SceneObject {
    int shape = 0;  // index into kShapeNames
    int color = 0;  // index into kPalette
    int cell = 0;   // row*3 + col
    bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
    std::vector<SceneObject> objects;        // 1..3, distinct cells, distinct shapes
    std::array<float, 3> background = kDefaultBackground;
    uint64_t seed = 0;
    bool operator==(const SceneSpec&) const = default;
};

// Closed vocabulary over the caption/QA grammar plus special tokens.
struct Vocabulary {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> ids;
    int pad = 0, bos = 0, eos = 0, img_start = 0, img_end = 0;

    static const Vocabulary& standard();

    int size() const { return static_cast<int>(tokens.size()); }
    int id(const std::string& tok) const;
    std::vector<int> encode(const std::string& text) const;   // whitespace split
    std::string decode(const std::vector<int>& seq) const;    // space join
};

struct QaPair {
    std::vector<int> question;
    std::vector<int> answer;
    bool operator==(const QaPair&) const = default;
};

struct CorpusRecord {
    Image image;
    std::vector<int> caption;
    std::vector<QaPair> qa;
    SceneSpec scene;
};

// Pure rendering: pixel-center point tests per shape, no anti-aliasing.
Image render(const SceneSpec& scene, int image_size);

// Caption per the fixed grammar:
//   "a {color} {shape} in the {cell-name}" joined by " and ".
std::vector<int> caption_tokens(const SceneSpec& scene);
std::vector<QaPair> qa_pairs(const SceneSpec& scene);
std::string cell_name(int cell);

// Deterministic record synthesis. Total function of (seed, difficulty, size).
SceneSpec generate_scene_spec(uint64_t seed, Difficulty difficulty);
CorpusRecord generate_scene(uint64_t seed, Difficulty difficulty, int image_size);

struct AttributeCheck {
    bool shape = false;
    bool color = false;
    bool position = false;
    bool count = false;
    bool all() const { return shape && color && position && count; }
};

// Template-matching classifier built on the renderer's own primitives.
// Classifies each grid cell as background or a (shape, color) pair and
// compares against the scene. Throws std::invalid_argument on size mismatch.
AttributeCheck verify_image_against_prompt(const Image& image, const SceneSpec& scene);

}  // namespace hydra
