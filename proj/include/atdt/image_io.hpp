#ifndef ATDT_IMAGE_IO_HPP_
#define ATDT_IMAGE_IO_HPP_

#include <algorithm>
#include <fstream>
#include <string>

#include "atdt/tensor.hpp"

// Minimal binary PPM/PGM writers for the `render` subcommand: quick visual
// inspection of generated scenes, predictions and occurrence maps.

namespace atdt {

namespace detail {

inline unsigned char to_byte(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<unsigned char>(c * 255.0f + 0.5f);
}

}  // namespace detail

// [3,H,W] float image in [0,1] -> binary PPM (P6)
inline void write_ppm(const std::string& path, const Tensor<float>& img) {
    check(img.rank() == 3 && img.shape[0] == 3, "write_ppm: expected [3,H,W]");
    const int H = img.shape[1], W = img.shape[2];
    std::ofstream os(path, std::ios::binary);
    check(os.is_open(), "write_ppm: cannot open " + path);
    os << "P6\n" << W << " " << H << "\n255\n";
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) os.put(static_cast<char>(detail::to_byte(img.data[c * plane + p])));
    check(os.good(), "write_ppm: write failed");
}

// [H,W] or [1,H,W] float map -> binary PGM (P5), linearly mapped from
// [lo, hi] (auto range when lo >= hi)
inline void write_pgm(const std::string& path, const Tensor<float>& map, float lo = 0.0f,
                      float hi = 0.0f) {
    check(map.rank() == 2 || (map.rank() == 3 && map.shape[0] == 1),
          "write_pgm: expected [H,W] or [1,H,W]");
    const int H = map.shape[map.rank() - 2], W = map.shape[map.rank() - 1];
    if (lo >= hi) {
        lo = *std::min_element(map.data.begin(), map.data.end());
        hi = *std::max_element(map.data.begin(), map.data.end());
        if (hi <= lo) hi = lo + 1.0f;
    }
    std::ofstream os(path, std::ios::binary);
    check(os.is_open(), "write_pgm: cannot open " + path);
    os << "P5\n" << W << " " << H << "\n255\n";
    for (float v : map.data) os.put(static_cast<char>(detail::to_byte((v - lo) / (hi - lo))));
    check(os.good(), "write_pgm: write failed");
}

}  // namespace atdt

#endif  // ATDT_IMAGE_IO_HPP_
