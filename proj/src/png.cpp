#include "fewdet/png.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "fewdet/errors.hpp"

namespace fewdet {

namespace {

using bytes = std::vector<std::uint8_t>;

std::uint32_t crc32_table_entry(std::uint32_t n) {
  std::uint32_t c = n;
  for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
  return c;
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t crc = 0) {
  static std::uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (std::uint32_t n = 0; n < 256; ++n) table[n] = crc32_table_entry(n);
    init = true;
  }
  std::uint32_t c = crc ^ 0xffffffffu;
  for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xff] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

std::uint32_t adler32(const std::uint8_t* data, std::size_t len) {
  std::uint32_t a = 1, b = 0;
  for (std::size_t i = 0; i < len; ++i) {
    a = (a + data[i]) % 65521;
    b = (b + a) % 65521;
  }
  return (b << 16) | a;
}

void put_u32(bytes& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(bytes& out, const char type[4], const bytes& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  put_u32(out, crc32(out.data() + start, out.size() - start));
}

// --- inflate (RFC 1951) ----------------------------------------------------

struct BitReader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;
  int bit = 0;

  std::uint32_t read_bits(int n) {
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) {
      if (pos >= size) throw data_error("png: truncated deflate stream");
      v |= static_cast<std::uint32_t>((data[pos] >> bit) & 1u) << i;
      if (++bit == 8) {
        bit = 0;
        ++pos;
      }
    }
    return v;
  }
  void align_byte() {
    if (bit != 0) {
      bit = 0;
      ++pos;
    }
  }
};

struct Huffman {
  // Canonical Huffman decoder from code lengths.
  std::vector<int> counts;   // number of codes per length
  std::vector<int> symbols;  // symbols sorted by (length, symbol)

  explicit Huffman(const std::vector<int>& lengths) {
    int max_len = 0;
    for (int l : lengths) max_len = std::max(max_len, l);
    counts.assign(static_cast<std::size_t>(max_len) + 1, 0);
    for (int l : lengths)
      if (l > 0) ++counts[static_cast<std::size_t>(l)];
    std::vector<int> offsets(static_cast<std::size_t>(max_len) + 2, 0);
    for (int l = 1; l <= max_len; ++l)
      offsets[static_cast<std::size_t>(l) + 1] = offsets[static_cast<std::size_t>(l)] + counts[static_cast<std::size_t>(l)];
    symbols.assign(lengths.size(), 0);
    for (std::size_t s = 0; s < lengths.size(); ++s)
      if (lengths[s] > 0) symbols[static_cast<std::size_t>(offsets[static_cast<std::size_t>(lengths[s])]++)] = static_cast<int>(s);
  }

  int decode(BitReader& br) const {
    int code = 0, first = 0, index = 0;
    for (std::size_t len = 1; len < counts.size(); ++len) {
      code |= static_cast<int>(br.read_bits(1));
      const int count = counts[len];
      if (code - first < count) return symbols[static_cast<std::size_t>(index + (code - first))];
      index += count;
      first = (first + count) << 1;
      code <<= 1;
    }
    throw data_error("png: invalid huffman code");
  }
};

bytes inflate(const std::uint8_t* data, std::size_t size) {
  static const int len_base[] = {3,  4,  5,  6,  7,  8,  9,  10, 11,  13,  15,  17,  19,  23, 27,
                                 31, 35, 43, 51, 59, 67, 83, 99, 115, 131, 163, 195, 227, 258};
  static const int len_extra[] = {0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2,
                                  2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0};
  static const int dist_base[] = {1,    2,    3,    4,    5,    7,     9,     13,    17,   25,
                                  33,   49,   65,   97,   129,  193,   257,   385,   513,  769,
                                  1025, 1537, 2049, 3073, 4097, 6145,  8193,  12289, 16385, 24577};
  static const int dist_extra[] = {0, 0, 0, 0, 1, 1, 2, 2,  3,  3,  4,  4,  5,  5,  6,
                                   6, 7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 13};

  BitReader br{data, size};
  bytes out;
  bool final_block = false;
  while (!final_block) {
    final_block = br.read_bits(1) != 0;
    const std::uint32_t btype = br.read_bits(2);
    if (btype == 0) {
      br.align_byte();
      if (br.pos + 4 > br.size) throw data_error("png: truncated stored block");
      const std::uint32_t len = static_cast<std::uint32_t>(br.data[br.pos]) |
                                (static_cast<std::uint32_t>(br.data[br.pos + 1]) << 8);
      br.pos += 4;  // skip LEN and NLEN
      if (br.pos + len > br.size) throw data_error("png: stored block overruns stream");
      out.insert(out.end(), br.data + br.pos, br.data + br.pos + len);
      br.pos += len;
    } else if (btype == 1 || btype == 2) {
      std::vector<int> lit_lengths, dist_lengths;
      if (btype == 1) {
        lit_lengths.assign(288, 0);
        for (int i = 0; i < 144; ++i) lit_lengths[static_cast<std::size_t>(i)] = 8;
        for (int i = 144; i < 256; ++i) lit_lengths[static_cast<std::size_t>(i)] = 9;
        for (int i = 256; i < 280; ++i) lit_lengths[static_cast<std::size_t>(i)] = 7;
        for (int i = 280; i < 288; ++i) lit_lengths[static_cast<std::size_t>(i)] = 8;
        dist_lengths.assign(30, 5);
      } else {
        const int hlit = static_cast<int>(br.read_bits(5)) + 257;
        const int hdist = static_cast<int>(br.read_bits(5)) + 1;
        const int hclen = static_cast<int>(br.read_bits(4)) + 4;
        static const int order[19] = {16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15};
        std::vector<int> cl_lengths(19, 0);
        for (int i = 0; i < hclen; ++i) cl_lengths[static_cast<std::size_t>(order[i])] = static_cast<int>(br.read_bits(3));
        Huffman cl(cl_lengths);
        std::vector<int> all;
        while (static_cast<int>(all.size()) < hlit + hdist) {
          const int sym = cl.decode(br);
          if (sym < 16) {
            all.push_back(sym);
          } else if (sym == 16) {
            if (all.empty()) throw data_error("png: bad code length repeat");
            const int rep = 3 + static_cast<int>(br.read_bits(2));
            for (int i = 0; i < rep; ++i) all.push_back(all.back());
          } else if (sym == 17) {
            const int rep = 3 + static_cast<int>(br.read_bits(3));
            for (int i = 0; i < rep; ++i) all.push_back(0);
          } else {
            const int rep = 11 + static_cast<int>(br.read_bits(7));
            for (int i = 0; i < rep; ++i) all.push_back(0);
          }
        }
        lit_lengths.assign(all.begin(), all.begin() + hlit);
        dist_lengths.assign(all.begin() + hlit, all.begin() + hlit + hdist);
      }
      Huffman lit(lit_lengths);
      Huffman dist(dist_lengths);
      for (;;) {
        const int sym = lit.decode(br);
        if (sym < 256) {
          out.push_back(static_cast<std::uint8_t>(sym));
        } else if (sym == 256) {
          break;
        } else {
          const int li = sym - 257;
          if (li >= 29) throw data_error("png: bad length symbol");
          const int length = len_base[li] + static_cast<int>(br.read_bits(len_extra[li]));
          const int di = dist.decode(br);
          if (di >= 30) throw data_error("png: bad distance symbol");
          const int distance = dist_base[di] + static_cast<int>(br.read_bits(dist_extra[di]));
          if (static_cast<std::size_t>(distance) > out.size()) throw data_error("png: distance too far back");
          const std::size_t start = out.size() - static_cast<std::size_t>(distance);
          for (int i = 0; i < length; ++i) out.push_back(out[start + static_cast<std::size_t>(i)]);
        }
      }
    } else {
      throw data_error("png: reserved deflate block type");
    }
  }
  return out;
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

void write_png(const std::string& path, const Image& img) {
  if (img.channels != 3) throw data_error("write_png: expected a 3-channel image");
  const int h = img.height, w = img.width;

  // Raw scanlines, filter type 0.
  bytes raw;
  raw.reserve(static_cast<std::size_t>(h) * (1 + static_cast<std::size_t>(w) * 3));
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::min(std::max(img.at(c, y, x), 0.0f), 1.0f);
        raw.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
      }
  }

  // zlib wrapper with stored deflate blocks (max 65535 bytes each).
  bytes z;
  z.push_back(0x78);
  z.push_back(0x01);
  std::size_t off = 0;
  while (off < raw.size() || raw.empty()) {
    const std::size_t n = std::min<std::size_t>(65535, raw.size() - off);
    const bool last = off + n == raw.size();
    z.push_back(last ? 1 : 0);
    z.push_back(static_cast<std::uint8_t>(n & 0xff));
    z.push_back(static_cast<std::uint8_t>(n >> 8));
    z.push_back(static_cast<std::uint8_t>(~n & 0xff));
    z.push_back(static_cast<std::uint8_t>((~n >> 8) & 0xff));
    z.insert(z.end(), raw.begin() + static_cast<std::ptrdiff_t>(off), raw.begin() + static_cast<std::ptrdiff_t>(off + n));
    off += n;
    if (last) break;
  }
  put_u32(z, adler32(raw.data(), raw.size()));

  bytes file;
  static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  file.insert(file.end(), sig, sig + 8);
  bytes ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(w));
  put_u32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  put_chunk(file, "IHDR", ihdr);
  put_chunk(file, "IDAT", z);
  put_chunk(file, "IEND", {});

  std::ofstream os(path, std::ios::binary);
  if (!os) throw data_error("write_png: cannot open " + path);
  os.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
  if (!os) throw data_error("write_png: write failed for " + path);
}

Image read_png(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error("read_png: cannot open " + path);
  bytes file((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
    throw data_error("read_png: not a PNG file: " + path);

  std::size_t pos = 8;
  int w = 0, h = 0, bit_depth = 0, color_type = 0;
  bytes idat;
  auto read_u32 = [&](std::size_t at) {
    return (static_cast<std::uint32_t>(file[at]) << 24) | (static_cast<std::uint32_t>(file[at + 1]) << 16) |
           (static_cast<std::uint32_t>(file[at + 2]) << 8) | static_cast<std::uint32_t>(file[at + 3]);
  };
  while (pos + 8 <= file.size()) {
    const std::uint32_t len = read_u32(pos);
    const std::string type(reinterpret_cast<const char*>(file.data() + pos + 4), 4);
    const std::size_t payload = pos + 8;
    if (payload + len + 4 > file.size()) throw data_error("read_png: truncated chunk in " + path);
    if (type == "IHDR") {
      w = static_cast<int>(read_u32(payload));
      h = static_cast<int>(read_u32(payload + 4));
      bit_depth = file[payload + 8];
      color_type = file[payload + 9];
      if (file[payload + 12] != 0) throw data_error("read_png: interlaced PNG unsupported");
      if (bit_depth != 8) throw data_error("read_png: only 8-bit depth supported");
      if (color_type != 0 && color_type != 2 && color_type != 6)
        throw data_error("read_png: unsupported color type " + std::to_string(color_type));
    } else if (type == "IDAT") {
      idat.insert(idat.end(), file.begin() + static_cast<std::ptrdiff_t>(payload),
                  file.begin() + static_cast<std::ptrdiff_t>(payload + len));
    } else if (type == "IEND") {
      break;
    }
    pos = payload + len + 4;
  }
  if (w <= 0 || h <= 0) throw data_error("read_png: missing IHDR in " + path);
  if (idat.size() < 2) throw data_error("read_png: missing IDAT in " + path);

  const bytes raw = inflate(idat.data() + 2, idat.size() - 2);  // skip zlib header
  const int src_ch = color_type == 0 ? 1 : (color_type == 2 ? 3 : 4);
  const std::size_t stride = static_cast<std::size_t>(w) * static_cast<std::size_t>(src_ch);
  if (raw.size() < static_cast<std::size_t>(h) * (stride + 1))
    throw data_error("read_png: decompressed size mismatch in " + path);

  // Undo per-scanline filters in place.
  bytes pix(static_cast<std::size_t>(h) * stride);
  for (int y = 0; y < h; ++y) {
    const std::uint8_t filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
    const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
    std::uint8_t* dst = pix.data() + static_cast<std::size_t>(y) * stride;
    const std::uint8_t* prev = y > 0 ? pix.data() + static_cast<std::size_t>(y - 1) * stride : nullptr;
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= static_cast<std::size_t>(src_ch) ? dst[i - static_cast<std::size_t>(src_ch)] : 0;
      const int b = prev ? prev[i] : 0;
      const int c = (prev && i >= static_cast<std::size_t>(src_ch)) ? prev[i - static_cast<std::size_t>(src_ch)] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw data_error("read_png: bad filter type");
      }
      dst[i] = static_cast<std::uint8_t>(v & 0xff);
    }
  }

  Image img(3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::uint8_t* p = pix.data() + static_cast<std::size_t>(y) * stride + static_cast<std::size_t>(x) * src_ch;
      float r, g, b;
      if (src_ch == 1) {
        r = g = b = static_cast<float>(p[0]) / 255.0f;
      } else {
        r = static_cast<float>(p[0]) / 255.0f;
        g = static_cast<float>(p[1]) / 255.0f;
        b = static_cast<float>(p[2]) / 255.0f;
      }
      img.at(0, y, x) = r;
      img.at(1, y, x) = g;
      img.at(2, y, x) = b;
    }
  return img;
}

}  // namespace fewdet
