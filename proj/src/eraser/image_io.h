#pragma once

#include <string>

#include "eraser/tensor.h"

namespace eraser {

// Binary PPM (P6, maxval 255). Values in [-1,1] map linearly to [0,255] with
// round-half-up; out-of-range values clamp.
void write_ppm(const std::string & path, const Tensor & img); // img: [H,W,3]

uint8_t byte_from_unit(float v); // the [-1,1] -> [0,255] quantizer

// Binary PGM (P5) mask: pixels > 127 read as 1. Returns [H,W] of 0/1 floats.
Tensor read_pgm_mask(const std::string & path);

} // namespace eraser
