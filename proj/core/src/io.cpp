#include "maldnerf/util/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "maldnerf/util/error.hpp"

namespace maldnerf {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "io error", "cannot open " + path);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), "io error", "cannot write " + path);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  require(f.good(), "io error", "short write to " + path);
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

void write_f32(const std::string& path, const float* data, size_t n) {
  static_assert(sizeof(float) == 4);
  write_file(path, std::string(reinterpret_cast<const char*>(data), n * 4));
}

std::vector<float> read_f32(const std::string& path, size_t expected_n) {
  const std::string bytes = read_file(path);
  require(bytes.size() == expected_n * 4, "corrupt file",
          path + ": expected " + std::to_string(expected_n * 4) + " bytes, got " +
              std::to_string(bytes.size()));
  std::vector<float> out(expected_n);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

// ---- PNG -------------------------------------------------------------------

namespace {

struct PngWriteCtx {
  std::string bytes;
};

void png_write_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* ctx = static_cast<PngWriteCtx*>(png_get_io_ptr(png));
  ctx->bytes.append(reinterpret_cast<char*>(data), len);
}

struct PngReadCtx {
  const std::string* bytes;
  size_t pos = 0;
};

void png_read_cb(png_structp png, png_bytep out, png_size_t len) {
  auto* ctx = static_cast<PngReadCtx*>(png_get_io_ptr(png));
  if (ctx->pos + len > ctx->bytes->size()) png_error(png, "truncated png");
  std::memcpy(out, ctx->bytes->data() + ctx->pos, len);
  ctx->pos += len;
}

void write_png_impl(const std::string& path, const uint8_t* rows, int h, int w, int channels) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  PngWriteCtx ctx;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    raise("io error", "png encode failed for " + path);
  }
  png_set_write_fn(png, &ctx, png_write_cb, nullptr);
  png_set_IHDR(png, info, w, h, 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> row_ptrs(h);
  for (int y = 0; y < h; ++y)
    row_ptrs[y] = const_cast<png_bytep>(rows + size_t(y) * w * channels);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  write_file(path, ctx.bytes);
}

}  // namespace

void write_png_rgb8(const std::string& path, const ImageF& img) {
  require(img.c == 3, "io error", "write_png_rgb8 expects 3 channels");
  std::vector<uint8_t> buf(size_t(img.h) * img.w * 3);
  for (size_t i = 0; i < buf.size(); ++i) {
    const float v = std::clamp(img.px[i], 0.f, 1.f);
    buf[i] = uint8_t(std::lround(v * 255.f));
  }
  write_png_impl(path, buf.data(), img.h, img.w, 3);
}

void write_png_gray8(const std::string& path, const Mask& mask) {
  std::vector<uint8_t> buf(mask.m.size());
  for (size_t i = 0; i < buf.size(); ++i) buf[i] = mask.m[i] ? 255 : 0;
  write_png_impl(path, buf.data(), mask.h, mask.w, 1);
}

ImageF read_png(const std::string& path) {
  const std::string bytes = read_file(path);
  require(bytes.size() > 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0,
          "corrupt file", path + ": not a png");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  PngReadCtx ctx{&bytes, 0};
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise("corrupt file", path + ": png decode failed");
  }
  png_set_read_fn(png, &ctx, png_read_cb);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int h = int(png_get_image_height(png, info));
  const int w = int(png_get_image_width(png, info));
  const int c = int(png_get_channels(png, info));
  require(c == 1 || c == 3, "corrupt file", path + ": unsupported channel count");
  std::vector<uint8_t> buf(size_t(h) * w * c);
  std::vector<png_bytep> row_ptrs(h);
  for (int y = 0; y < h; ++y) row_ptrs[y] = buf.data() + size_t(y) * w * c;
  png_read_image(png, row_ptrs.data());
  png_destroy_read_struct(&png, &info, nullptr);
  ImageF img(h, w, c);
  for (size_t i = 0; i < buf.size(); ++i) img.px[i] = float(buf[i]) / 255.f;
  return img;
}

Mask read_png_mask(const std::string& path) {
  const ImageF img = read_png(path);
  Mask m(img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) m.set(y, x, img.at(y, x, 0) > 0.5f);
  return m;
}

// ---- blob ------------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'M', 'N', 'R', 'F'};

template <class T>
void put(std::string& s, T v) {
  s.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(const std::string& s, size_t& pos, const std::string& path) {
  require(pos + sizeof(T) <= s.size(), "corrupt file", path + ": blob truncated");
  T v;
  std::memcpy(&v, s.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}
}  // namespace

void write_blob(const std::string& path, const Blob& blob) {
  std::string s;
  s.append(kMagic, 4);
  put<uint32_t>(s, kBlobVersion);
  put<uint32_t>(s, blob.kind);
  put<uint32_t>(s, uint32_t(blob.meta.size()));
  for (int64_t m : blob.meta) put<int64_t>(s, m);
  put<uint64_t>(s, uint64_t(blob.params.size()));
  s.append(reinterpret_cast<const char*>(blob.params.data()), blob.params.size() * 4);
  write_file(path, s);
}

Blob read_blob(const std::string& path, uint32_t expected_kind) {
  const std::string s = read_file(path);
  size_t pos = 0;
  require(s.size() >= 4 && std::memcmp(s.data(), kMagic, 4) == 0, "corrupt file",
          path + ": bad magic");
  pos = 4;
  const auto version = take<uint32_t>(s, pos, path);
  require(version == kBlobVersion, "corrupt file",
          path + ": unsupported blob version " + std::to_string(version));
  Blob blob;
  blob.kind = take<uint32_t>(s, pos, path);
  require(blob.kind == expected_kind, "corrupt file",
          path + ": blob kind " + std::to_string(blob.kind) + ", expected " +
              std::to_string(expected_kind));
  const auto n_meta = take<uint32_t>(s, pos, path);
  blob.meta.resize(n_meta);
  for (auto& m : blob.meta) m = take<int64_t>(s, pos, path);
  const auto n_params = take<uint64_t>(s, pos, path);
  require(pos + n_params * 4 == s.size(), "corrupt file", path + ": parameter payload size mismatch");
  blob.params.resize(n_params);
  std::memcpy(blob.params.data(), s.data() + pos, n_params * 4);
  return blob;
}

// ---- hashing ---------------------------------------------------------------

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

}  // namespace maldnerf
