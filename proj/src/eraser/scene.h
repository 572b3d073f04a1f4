#pragma once

#include <cstdint>
#include <vector>

#include "eraser/denoiser.h"
#include "eraser/rng.h"
#include "eraser/tensor.h"

namespace eraser {

inline constexpr int kImg = 16;

inline constexpr int kShapeSquare = 0;
inline constexpr int kShapeDisk = 1;

// color index 0=red, 1=green, 2=blue over saturated [-1,1] channels
void color_vec(int color, float out[3]);

struct SceneObject {
    int shape = kShapeSquare;
    int color = 0;
    // squares: top-left corner; disks: integer center
    int x = 0, y = 0;
    int size = 4; // 4..7 px

    int color_token() const { return kTokRed + color; }
    int shape_token() const { return shape == kShapeSquare ? kTokSquare : kTokDisk; }
};

struct Scene {
    std::vector<SceneObject> objects; // 1 or 2, non-overlapping
    std::vector<std::vector<uint8_t>> masks; // per object, kImg*kImg binary
    PromptTokens tokens; // (color, shape) per object, PAD-filled
    Tensor image; // [16,16,3], gray 0 background
};

std::vector<uint8_t> object_mask(const SceneObject & o);
Tensor render_objects(const std::vector<SceneObject> & objects);
PromptTokens tokens_for(const std::vector<SceneObject> & objects);

// Deterministic from the rng state: a p=0.5 coin picks 1 vs 2 objects, then
// shapes/colors/sizes are drawn and placements rejection-sampled (100 tries,
// then sizes are regenerated). Two-object scenes have distinct
// (shape, color) descriptors and disjoint masks.
Scene gen_scene(Rng & rng);

// Assembles masks, tokens and the rendered image for fixed objects (used to
// rebuild the scene recorded in an inversion bundle).
Scene scene_from_objects(const std::vector<SceneObject> & objects);

// Word positions (prompt indices) describing object i: {2i, 2i+1}.
std::vector<int> object_word_positions(const Scene & scene, int object_index);

} // namespace eraser
