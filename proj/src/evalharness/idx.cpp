#include <zlib.h>

#include <memory>

#include "advdef/evalharness.hpp"

namespace advdef::eval {

ParseError::ParseError(const std::string& path, std::uint64_t offset, const std::string& what)
    : std::runtime_error(path + ": " + what + " at byte " + std::to_string(offset)), offset_(offset) {}

namespace {

// Whole decompressed content; gzread passes plain files through unchanged.
std::vector<std::uint8_t> read_maybe_gzip(const fs::path& path) {
  std::unique_ptr<gzFile_s, int (*)(gzFile)> f(gzopen(path.string().c_str(), "rb"), gzclose);
  if (!f) throw std::runtime_error(path.string() + ": cannot open");
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  for (;;) {
    int n = gzread(f.get(), buf, sizeof buf);
    if (n < 0) {
      int err = 0;
      const char* msg = gzerror(f.get(), &err);
      throw ParseError(path.string(), out.size(), std::string("decompression failed: ") + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  return out;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) | (std::uint32_t(b[at + 2]) << 8) | b[at + 3];
}

fs::path find_file(const fs::path& dir, const std::string& stem) {
  for (const auto& name : {stem, stem + ".gz"})
    if (fs::exists(dir / name)) return dir / name;
  throw std::runtime_error("missing " + (dir / stem).string() + "[.gz]");
}

}  // namespace

IdxArray read_idx(const fs::path& path) {
  auto raw = read_maybe_gzip(path);
  const std::string where = path.string();
  if (raw.size() < 4) throw ParseError(where, raw.size(), "truncated header");
  const std::uint32_t magic = be32(raw, 0);
  if (magic != 0x801 && magic != 0x803)
    throw ParseError(where, 0, "bad magic 0x" + [&] {
      char s[16];
      std::snprintf(s, sizeof s, "%08x", magic);
      return std::string(s);
    }());
  IdxArray out;
  const std::size_t rank = magic & 0xff;
  std::size_t at = 4, count = 1;
  for (std::size_t i = 0; i < rank; ++i, at += 4) {
    if (at + 4 > raw.size()) throw ParseError(where, raw.size(), "truncated dimension list");
    out.dims.push_back(be32(raw, at));
    count *= out.dims.back();
  }
  if (raw.size() - at < count)
    throw ParseError(where, raw.size(),
                     "truncated payload: expected " + std::to_string(count) + " bytes, got " + std::to_string(raw.size() - at));
  if (raw.size() - at > count) throw ParseError(where, at + count, "trailing bytes after payload");
  out.bytes.assign(raw.begin() + static_cast<std::ptrdiff_t>(at), raw.end());
  return out;
}

Dataset load_idx(const fs::path& images, const fs::path& labels, std::string name, Split split, std::size_t classes) {
  auto img = read_idx(images);
  auto lab = read_idx(labels);
  if (img.dims.size() != 3) throw ParseError(images.string(), 0, "expected an image file of rank 3");
  if (lab.dims.size() != 1) throw ParseError(labels.string(), 0, "expected a label file of rank 1");
  if (img.dims[0] != lab.dims[0])
    throw std::runtime_error("count mismatch: " + images.string() + " holds " + std::to_string(img.dims[0]) +
                             " images, " + labels.string() + " holds " + std::to_string(lab.dims[0]) + " labels");
  Dataset d;
  d.name = std::move(name);
  d.split = split;
  d.classes = classes;
  const std::size_t n = img.dims[0], h = img.dims[1], w = img.dims[2];
  std::vector<float> px(img.bytes.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(img.bytes[i]) / 255.0f;
  d.labels.assign(lab.bytes.begin(), lab.bytes.end());
  if (n > 0) d.images = Tensor({n, h, w, 1}, std::move(px));
  d.validate();
  return d;
}

Dataset load_mnist(const fs::path& dir, Split split) {
  const std::string prefix = split == Split::train ? "train" : "t10k";
  return load_idx(find_file(dir, prefix + "-images-idx3-ubyte"), find_file(dir, prefix + "-labels-idx1-ubyte"),
                  split == Split::train ? "mnist-train" : "mnist-test", split);
}

}  // namespace advdef::eval
