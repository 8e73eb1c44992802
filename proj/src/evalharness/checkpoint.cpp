#include <bit>
#include <fstream>
#include <set>
#include <sstream>

#include "advdef/evalharness.hpp"

namespace advdef::eval {

namespace {

constexpr char kMagic[8] = {'A', 'D', 'V', 'D', 'E', 'F', 'v', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : b_(bytes), source_(std::move(source)) {}

  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(b_[at_ + i])) << (8 * i);
    at_ += 4;
    return v;
  }
  std::string bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = b_.substr(at_, n);
    at_ += n;
    return s;
  }
  bool done() const { return at_ == b_.size(); }
  std::size_t left() const { return b_.size() - at_; }
  std::size_t offset() const { return at_; }
  [[noreturn]] void fail(const std::string& what) const { throw ParseError(source_, at_, what); }

 private:
  void need(std::size_t n, const std::string& what) {
    if (b_.size() - at_ < n) fail("truncated " + what);
  }
  const std::string& b_;
  std::string source_;
  std::size_t at_ = 0;
};

}  // namespace

models::ClassifierSpec Checkpoint::classifier_spec() const {
  if (kind != ModelKind::classifier) throw std::invalid_argument("checkpoint holds a vae, not a classifier");
  return classifier_spec_from_json(spec);
}

models::VaeSpec Checkpoint::vae_spec() const {
  if (kind != ModelKind::vae) throw std::invalid_argument("checkpoint holds a classifier, not a vae");
  return vae_spec_from_json(spec);
}

Checkpoint make_checkpoint(const models::ClassifierSpec& spec, models::ParamStore params, std::uint64_t seed,
                           Json metadata) {
  return {ModelKind::classifier, to_json(spec), seed, std::move(metadata), std::move(params)};
}

Checkpoint make_checkpoint(const models::VaeSpec& spec, models::ParamStore params, std::uint64_t seed,
                           Json metadata) {
  return {ModelKind::vae, to_json(spec), seed, std::move(metadata), std::move(params)};
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Json header;
  header["kind"] = ckpt.kind == ModelKind::classifier ? "classifier" : "vae";
  header["spec"] = ckpt.spec;
  header["seed"] = ckpt.seed;
  header["metadata"] = ckpt.metadata;
  Json buffers = Json::array();
  for (const auto& e : ckpt.params.entries())
    if (!e.trainable) buffers.push_back(e.name);
  header["buffers"] = buffers;
  const std::string text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& e : ckpt.params.entries()) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put_u32(out, static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : e.value.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source) {
  Reader r(bytes, source);
  if (r.bytes(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) throw ParseError(source, 0, "bad magic");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) throw ParseError(source, 8, "unsupported version " + std::to_string(version));
  const auto len = r.u32("header length");
  const auto header_at = r.offset();
  Json header;
  try {
    header = Json::parse(r.bytes(len, "header"));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(source, header_at, std::string("malformed header: ") + e.what());
  }
  Checkpoint c;
  const auto kind = header.at("kind").get<std::string>();
  if (kind != "classifier" && kind != "vae") throw ParseError(source, header_at, "unknown model kind '" + kind + "'");
  c.kind = kind == "classifier" ? ModelKind::classifier : ModelKind::vae;
  c.spec = header.at("spec");
  c.seed = header.value("seed", std::uint64_t{0});
  c.metadata = header.value("metadata", Json::object());
  std::set<std::string> buffers;
  for (const auto& b : header.value("buffers", Json::array())) buffers.insert(b.get<std::string>());

  while (!r.done()) {
    const auto name_len = r.u32("tensor name length");
    const auto name = r.bytes(name_len, "tensor name");
    const auto rank = r.u32("rank of tensor '" + name + "'");
    if (rank > 8) r.fail("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(r.u32("dims of tensor '" + name + "'"));
      count *= shape.back();
    }
    if (count * 4 > r.left())
      r.fail("payload of tensor '" + name + "' needs " + std::to_string(count * 4) + " bytes, " +
             std::to_string(r.left()) + " left");
    std::vector<float> data(count);
    for (auto& v : data) v = std::bit_cast<float>(r.u32("payload"));
    c.params.add(name, Tensor(std::move(shape), std::move(data)), !buffers.count(name));
  }
  return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) { write_text(path, serialize_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const fs::path& path) { return parse_checkpoint(read_text(path), path.string()); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path.string() + ": cannot open for writing");
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw std::runtime_error(path.string() + ": write failed");
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path.string() + ": cannot open");
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

}  // namespace advdef::eval
