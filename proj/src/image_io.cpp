// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace featsplat {

void save_png(const Image &image, const std::filesystem::path &path) {
    if (image.channels != 1 && image.channels != 3)
        throw DataError("PNG export needs 1 or 3 channels, got " + std::to_string(image.channels));
    if (image.pixel_count() == 0)
        throw DataError("PNG export of an empty image");

    std::unique_ptr<FILE, int (*)(FILE *)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!file)
        throw FormatError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw FormatError("libpng initialization failed");
    }
    std::vector<png_byte> rows(image.data.size());
    for (std::size_t k = 0; k < rows.size(); ++k)
        rows[k] = static_cast<png_byte>(std::lround(std::clamp(image.data[k], 0.0f, 1.0f) * 255.0f));
    std::vector<png_bytep> rowPtrs(image.height);
    for (int y = 0; y < image.height; ++y)
        rowPtrs[y] = rows.data() + static_cast<std::size_t>(y) * image.width * image.channels;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("libpng failed writing " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, image.width, image.height, 8,
                 image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rowPtrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

} // namespace featsplat
