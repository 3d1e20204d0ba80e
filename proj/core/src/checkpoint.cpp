#include "m2fn/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "m2fn/errors.hpp"
#include "m2fn/random.hpp"

namespace m2fn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', '2', 'F', 'N', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string(std::size_t len) {
    need(len);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }

  void get_doubles(double* dst, std::size_t count) {
    need(count * sizeof(double));
    std::memcpy(dst, bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > limit_) throw DataError("checkpoint: truncated record");
  }
  const std::string& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const NamedTensors& tensors, const std::string& metadata) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, metadata.size());
  out += metadata;
  put<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    const auto v = t.values();
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors,
                     const std::string& metadata) {
  const std::string bytes = encode_checkpoint(tensors, metadata);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint: cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("checkpoint: write failed for " + path.string());
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t) ||
      !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw DataError("checkpoint: bad magic");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  if (stored != fnv1a64(std::string_view(bytes).substr(0, body))) {
    throw DataError("checkpoint: checksum mismatch");
  }
  Reader r(bytes, body);
  r.get_string(sizeof(kMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.metadata = r.get_string(r.get<std::uint64_t>());
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.get_string(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    std::vector<double> values(element_count(shape));
    r.get_doubles(values.data(), values.size());
    ck.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (r.pos() != body) throw DataError("checkpoint: trailing bytes");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_checkpoint(ss.str());
}

void restore_tensors(const Checkpoint& checkpoint, NamedTensors& targets) {
  if (checkpoint.tensors.size() != targets.size()) {
    throw DataError("checkpoint: holds " + std::to_string(checkpoint.tensors.size()) +
                    " tensors, model expects " + std::to_string(targets.size()));
  }
  for (auto& [name, target] : targets) {
    auto it = checkpoint.tensors.find(name);
    if (it == checkpoint.tensors.end()) throw DataError("checkpoint: missing tensor " + name);
    if (it->second.shape() != target.shape()) {
      throw DataError("checkpoint: shape mismatch for " + name + ": " +
                      shape_string(it->second.shape()) + " vs " + shape_string(target.shape()));
    }
    const auto src = it->second.values();
    std::copy(src.begin(), src.end(), target.mutable_values().begin());
  }
}

}  // namespace m2fn
