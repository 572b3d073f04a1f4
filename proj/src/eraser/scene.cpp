#include "eraser/scene.h"

namespace eraser {

namespace {

void require(bool ok, const std::string & msg) {
    if (!ok) throw contract_error(msg);
}

} // namespace

void color_vec(int color, float out[3]) {
    require(color >= 0 && color < 3, "color_vec: color out of range");
    out[0] = color == 0 ? 1.0f : -1.0f;
    out[1] = color == 1 ? 1.0f : -1.0f;
    out[2] = color == 2 ? 1.0f : -1.0f;
}

std::vector<uint8_t> object_mask(const SceneObject & o) {
    std::vector<uint8_t> m(static_cast<size_t>(kImg) * kImg, 0);
    if (o.shape == kShapeSquare) {
        for (int yy = o.y; yy < o.y + o.size; ++yy) {
            for (int xx = o.x; xx < o.x + o.size; ++xx) {
                require(yy >= 0 && yy < kImg && xx >= 0 && xx < kImg, "object_mask: square out of bounds");
                m[static_cast<size_t>(yy) * kImg + static_cast<size_t>(xx)] = 1;
            }
        }
    } else {
        double r = static_cast<double>(o.size) / 2.0;
        double r2 = r * r;
        for (int yy = 0; yy < kImg; ++yy) {
            for (int xx = 0; xx < kImg; ++xx) {
                double dx = xx - o.x, dy = yy - o.y;
                if (dx * dx + dy * dy <= r2) {
                    require(yy >= 0 && yy < kImg && xx >= 0 && xx < kImg, "object_mask: disk out of bounds");
                    m[static_cast<size_t>(yy) * kImg + static_cast<size_t>(xx)] = 1;
                }
            }
        }
    }
    return m;
}

Tensor render_objects(const std::vector<SceneObject> & objects) {
    Tensor img({kImg, kImg, 3}); // gray 0 background
    for (const auto & o : objects) {
        float c[3];
        color_vec(o.color, c);
        std::vector<uint8_t> m = object_mask(o);
        for (int yy = 0; yy < kImg; ++yy) {
            for (int xx = 0; xx < kImg; ++xx) {
                if (!m[static_cast<size_t>(yy) * kImg + static_cast<size_t>(xx)]) continue;
                for (int ch = 0; ch < 3; ++ch) img[img.at3(yy, xx, ch)] = c[ch];
            }
        }
    }
    return img;
}

PromptTokens tokens_for(const std::vector<SceneObject> & objects) {
    require(!objects.empty() && objects.size() <= 2, "tokens_for: 1 or 2 objects");
    PromptTokens t;
    t.ids.fill(kTokPad);
    for (size_t i = 0; i < objects.size(); ++i) {
        t.ids[2 * i] = objects[i].color_token();
        t.ids[2 * i + 1] = objects[i].shape_token();
    }
    return t;
}

namespace {

// Draw everything but the position.
SceneObject draw_descriptor(Rng & rng) {
    SceneObject o;
    o.shape = static_cast<int>(rng.uniform_int(2));
    o.color = static_cast<int>(rng.uniform_int(3));
    o.size = 4 + static_cast<int>(rng.uniform_int(4));
    return o;
}

void draw_position(SceneObject & o, Rng & rng) {
    if (o.shape == kShapeSquare) {
        o.x = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(kImg - o.size + 1)));
        o.y = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(kImg - o.size + 1)));
    } else {
        // strict containment for the disk's bounding extent
        int m = o.size / 2;
        o.x = m + static_cast<int>(rng.uniform_int(static_cast<uint32_t>(kImg - 2 * m)));
        o.y = m + static_cast<int>(rng.uniform_int(static_cast<uint32_t>(kImg - 2 * m)));
    }
}

bool masks_disjoint(const std::vector<uint8_t> & a, const std::vector<uint8_t> & b) {
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] && b[i]) return false;
    }
    return true;
}

} // namespace

Scene gen_scene(Rng & rng) {
    int n = rng.uniform() < 0.5 ? 1 : 2;
    Scene s;
    for (;;) {
        s.objects.clear();
        for (int i = 0; i < n; ++i) s.objects.push_back(draw_descriptor(rng));
        if (n == 2 && s.objects[0].shape == s.objects[1].shape &&
            s.objects[0].color == s.objects[1].color) {
            continue; // descriptors must be distinct so the prompt is unambiguous
        }
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            for (auto & o : s.objects) draw_position(o, rng);
            if (n == 1) {
                placed = true;
            } else {
                placed = masks_disjoint(object_mask(s.objects[0]), object_mask(s.objects[1]));
            }
        }
        if (placed) break;
        // placement failed 100 times: regenerate sizes (and the rest)
    }
    std::vector<SceneObject> objects = std::move(s.objects);
    return scene_from_objects(objects);
}

Scene scene_from_objects(const std::vector<SceneObject> & objects) {
    Scene s;
    s.objects = objects;
    for (const auto & o : s.objects) s.masks.push_back(object_mask(o));
    s.tokens = tokens_for(s.objects);
    s.image = render_objects(s.objects);
    return s;
}

std::vector<int> object_word_positions(const Scene & scene, int object_index) {
    require(object_index >= 0 && object_index < static_cast<int>(scene.objects.size()),
            "object_word_positions: index out of range");
    return {2 * object_index, 2 * object_index + 1};
}

} // namespace eraser
