#include "imask/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include "imask/errors.hpp"

namespace imask {
namespace {

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xffu));
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T le() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
    }
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(std::span<const NamedTensor> records) {
  std::string out(kCheckpointMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.tensor.rank()));
    for (std::size_t d : r.tensor.shape()) put_le<std::uint64_t>(out, d);
    for (double v : r.tensor.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw ParseError("not a checkpoint: bad magic");
  }
  const auto version = in.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = in.le<std::uint32_t>();
  std::vector<NamedTensor> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor r;
    r.name = std::string(in.take(in.le<std::uint32_t>()));
    const auto rank = in.le<std::uint32_t>();
    if (rank > 8) throw ParseError("checkpoint record '" + r.name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.le<std::uint64_t>();
    const std::size_t n = shape_numel(shape);
    if (n > bytes.size()) throw ParseError("checkpoint truncated in record '" + r.name + "'");
    std::vector<double> values(n);
    for (double& v : values) v = std::bit_cast<double>(in.le<std::uint64_t>());
    r.tensor = Tensor(std::move(shape), std::move(values));
    records.push_back(std::move(r));
  }
  if (!in.done()) throw ParseError("trailing bytes after checkpoint records");
  return records;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> records) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(records);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void assign_state(std::span<NamedTensor> target, std::span<const NamedTensor> source,
                  bool allow_extra) {
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& r : source) by_name[r.name] = &r;
  for (auto& t : target) {
    auto it = by_name.find(t.name);
    if (it == by_name.end()) {
      throw ArchitectureError("architecture mismatch: checkpoint has no tensor '" + t.name + "'");
    }
    const Tensor& src = it->second->tensor;
    if (src.shape() != t.tensor.shape()) {
      throw ArchitectureError("architecture mismatch: '" + t.name + "' is " +
                              shape_to_string(src.shape()) + " in checkpoint but " +
                              shape_to_string(t.tensor.shape()) + " in network");
    }
    std::copy(src.data().begin(), src.data().end(), t.tensor.data().begin());
    by_name.erase(it);
  }
  if (!allow_extra && !by_name.empty()) {
    throw ArchitectureError("architecture mismatch: unexpected tensor '" +
                            by_name.begin()->first + "' in checkpoint");
  }
}

}  // namespace imask
