#include "eraser/image_io.h"

#include <cmath>
#include <fstream>
#include <vector>

namespace eraser {

namespace {

void require(bool ok, const std::string & msg) {
    if (!ok) throw contract_error(msg);
}

} // namespace

uint8_t byte_from_unit(float v) {
    double u = (static_cast<double>(v) + 1.0) * 0.5 * 255.0;
    double r = std::floor(u + 0.5); // round half up
    if (r < 0.0) r = 0.0;
    if (r > 255.0) r = 255.0;
    return static_cast<uint8_t>(r);
}

void write_ppm(const std::string & path, const Tensor & img) {
    require(img.ndim() == 3 && img.shape[2] == 3, "write_ppm: image must be [H,W,3]");
    int H = img.shape[0], W = img.shape[1];
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "write_ppm: cannot open " + path);
    f << "P6\n" << W << " " << H << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(W) * 3);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            for (int c = 0; c < 3; ++c) {
                row[static_cast<size_t>(x) * 3 + static_cast<size_t>(c)] =
                    byte_from_unit(img[img.at3(y, x, c)]);
            }
        }
        f.write(reinterpret_cast<const char *>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    require(f.good(), "write_ppm: write failed: " + path);
}

Tensor read_pgm_mask(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "read_pgm_mask: cannot open " + path);
    std::string magic;
    f >> magic;
    require(magic == "P5", "read_pgm_mask: expected binary PGM (P5)");
    int W = 0, H = 0, maxval = 0;
    f >> W >> H >> maxval;
    require(W > 0 && H > 0 && maxval > 0 && maxval < 256, "read_pgm_mask: bad PGM header");
    f.get(); // single whitespace after maxval
    Tensor m({H, W});
    std::vector<uint8_t> buf(static_cast<size_t>(W) * static_cast<size_t>(H));
    f.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
    require(f.good(), "read_pgm_mask: truncated payload");
    for (size_t i = 0; i < buf.size(); ++i) m[static_cast<int64_t>(i)] = buf[i] > 127 ? 1.0f : 0.0f;
    return m;
}

} // namespace eraser
