#pragma once

#include <string>

#include "fewdet/image.hpp"

namespace fewdet {

// Minimal self-contained PNG codec. The writer emits 8-bit RGB with an
// uncompressed (stored-block) zlib stream; the reader handles any conforming
// zlib stream (stored, fixed and dynamic Huffman), all five scanline filters,
// and 8-bit gray / RGB / RGBA color types, non-interlaced.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

}  // namespace fewdet
