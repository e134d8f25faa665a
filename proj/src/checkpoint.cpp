#include "metaalign/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "metaalign/errors.hpp"

namespace metaalign::checkpoint {

namespace {

constexpr char kMagic[8] = {'M', 'A', 'L', 'N', 'C', 'K', 'P', 'T'};
// Guards against absurd allocations when reading a corrupt header.
constexpr std::uint64_t kMaxCount = 1u << 20;
constexpr std::uint64_t kMaxNumel = std::uint64_t{1} << 32;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(std::ifstream& in, const std::string& path) : in_(in), path_(path) {}

  template <typename T>
  T get(const char* what) {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) fail(std::string("truncated while reading ") + what);
    return v;
  }

  void bytes(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (!in_) fail(std::string("truncated while reading ") + what);
  }

  [[noreturn]] void fail(const std::string& why) const {
    throw IoError("corrupt checkpoint " + path_ + ": " + why);
  }

 private:
  std::ifstream& in_;
  const std::string& path_;
};

}  // namespace

void save(const std::string& path, const ParamStore& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, params.size());
  for (const auto& [id, t] : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(id.name.size()));
    out.write(id.name.data(), static_cast<std::streamsize>(id.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    const auto v = t.values();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  out.flush();
  if (!out) throw IoError("failed writing checkpoint " + path);
}

ParamStore load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint not found or unreadable: " + path);
  Reader r(in, path);
  char magic[8];
  r.bytes(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) r.fail("bad magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kFormatVersion) r.fail("unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint64_t>("parameter count");
  if (count > kMaxCount) r.fail("implausible parameter count");
  ParamStore out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>("name length");
    if (len == 0 || len > 4096) r.fail("bad name length");
    std::string name(len, '\0');
    r.bytes(name.data(), len, "name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) r.fail("bad rank for " + name);
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>("dimension");
      if (d == 0 || d > kMaxNumel) r.fail("bad dimension for " + name);
      numel *= d;
      if (numel > kMaxNumel) r.fail("parameter too large: " + name);
      shape.push_back(static_cast<std::size_t>(d));
    }
    std::vector<double> values(numel);
    r.bytes(reinterpret_cast<char*>(values.data()), numel * sizeof(double), "values");
    if (!out.emplace(ParamId{name}, Tensor(shape, std::move(values))).second) {
      r.fail("duplicate parameter " + name);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes");
  return out;
}

void restore(nn::ModelBundle& model, const ParamStore& stored, const std::string& path) {
  if (stored.size() != model.params.size()) {
    throw IoError("checkpoint " + path + " holds " + std::to_string(stored.size()) +
                  " parameters, model expects " + std::to_string(model.params.size()));
  }
  for (const auto& [id, t] : model.params) {
    const auto it = stored.find(id);
    if (it == stored.end()) throw IoError("checkpoint " + path + " lacks parameter " + id.name);
    if (it->second.shape() != t.shape()) {
      throw IoError("checkpoint " + path + ": parameter " + id.name + " has shape " +
                    shape_string(it->second.shape()) + ", model expects " + shape_string(t.shape()));
    }
  }
  model.params = stored;
}

}  // namespace metaalign::checkpoint
