// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "featsplat/common.hpp"

#include <filesystem>

namespace featsplat {

/// 8-bit PNG of a 1- or 3-channel image; values are clamped to [0, 1].
void save_png(const Image &image, const std::filesystem::path &path);

} // namespace featsplat
