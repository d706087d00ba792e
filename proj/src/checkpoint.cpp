#include "scedit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "scedit/errors.hpp"

namespace scedit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'S', 'C', 'E', 'D'};

template <class T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

class Reader {
 public:
  Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  template <class T>
  T get(const char* what) {
    T v;
    take(&v, sizeof(T), what);
    return v;
  }

  void take(void* dst, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointErrc::kTruncated,
                            path_ + ": truncated while reading " + what + " at byte " + std::to_string(pos_));
    }
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  std::string buf(kMagic, 4);
  put<std::uint32_t>(buf, kCheckpointVersion);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(e.name.size()));
    buf += e.name;
    put<std::uint8_t>(buf, static_cast<std::uint8_t>(e.tensor.dtype()));
    put<std::uint8_t>(buf, static_cast<std::uint8_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) put<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
    put<std::uint8_t>(buf, static_cast<std::uint8_t>(e.partition));
    visit_dtype(e.tensor.dtype(), [&]<class T>() {
      auto d = e.tensor.data<T>();
      buf.append(reinterpret_cast<const char*>(d.data()), d.size_bytes());
    });
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointErrc::kIo, "cannot open " + path.string() + " for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw CheckpointError(CheckpointErrc::kIo, "write failed: " + path.string());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointErrc::kIo, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());

  char magic[4];
  r.take(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(CheckpointErrc::kBadMagic, path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrc::kBadVersion,
                          path.string() + ": unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("entry count");
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.get<std::uint32_t>("name length");
    if (len > (1u << 20)) {
      throw CheckpointError(CheckpointErrc::kTruncated, path.string() + ": corrupt name length");
    }
    e.name.resize(len);
    r.take(e.name.data(), len, "name");
    const auto code = r.get<std::uint8_t>("dtype");
    if (code > 1) {
      throw CheckpointError(CheckpointErrc::kBadVersion,
                            path.string() + ": entry '" + e.name + "' has unknown dtype code " + std::to_string(code));
    }
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape;
    for (int d = 0; d < rank; ++d) shape.push_back(r.get<std::uint32_t>("dims"));
    const auto part = r.get<std::uint8_t>("partition");
    if (part > 2) {
      throw CheckpointError(CheckpointErrc::kBadVersion,
                            path.string() + ": entry '" + e.name + "' has unknown partition " + std::to_string(part));
    }
    e.partition = static_cast<Partition>(part);
    e.tensor = Tensor::empty(shape, static_cast<DType>(code));
    visit_dtype(e.tensor.dtype(), [&]<class T>() {
      auto d = e.tensor.mutable_data<T>();
      r.take(d.data(), d.size_bytes(), "payload");
    });
    entries.push_back(std::move(e));
  }
  if (!r.done()) throw CheckpointError(CheckpointErrc::kTruncated, path.string() + ": trailing bytes");
  return entries;
}

void assign_entries(const std::vector<CheckpointEntry>& entries, const ParamList& targets) {
  const std::size_t n = std::max(entries.size(), targets.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (i >= entries.size()) {
      throw CheckpointError(CheckpointErrc::kLayoutMismatch,
                            "checkpoint lacks entry '" + targets[i].name + "'");
    }
    const auto& e = entries[i];
    if (i >= targets.size()) {
      throw CheckpointError(CheckpointErrc::kLayoutMismatch, "unexpected entry '" + e.name + "'");
    }
    const auto& t = targets[i];
    if (e.name != t.name || e.tensor.shape() != t.tensor.shape() || e.partition != t.partition) {
      throw CheckpointError(CheckpointErrc::kLayoutMismatch,
                            "entry '" + e.name + "' " + shape_str(e.tensor.shape()) + " does not match '" +
                                t.name + "' " + shape_str(t.tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor dst = targets[i].tensor;
    dst.assign(entries[i].tensor);
  }
}

void save_checkpoint(const std::filesystem::path& path, const UNet& unet, const TunerStack* stack,
                     CheckpointScope scope) {
  ParamList params;
  if (scope == CheckpointScope::kAll) params = unet.parameters();
  if (stack != nullptr) {
    auto tuned = stack->parameters();
    params.insert(params.end(), tuned.begin(), tuned.end());
  }
  if (scope == CheckpointScope::kTunerOnly && params.empty()) {
    throw ConfigError("tuner-only checkpoint requested without a tuner stack");
  }
  std::vector<CheckpointEntry> entries;
  entries.reserve(params.size());
  for (auto& p : params) entries.push_back({p.name, p.partition, p.tensor});
  write_checkpoint(path, entries);
}

void load_checkpoint(const std::filesystem::path& path, UNet* unet, TunerStack* stack) {
  const auto entries = read_checkpoint(path);
  std::vector<CheckpointEntry> backbone, tuned;
  for (const auto& e : entries) {
    (e.partition == Partition::kBackbone ? backbone : tuned).push_back(e);
  }
  if (!backbone.empty()) {
    if (unet == nullptr) {
      throw CheckpointError(CheckpointErrc::kLayoutMismatch,
                            "unexpected backbone entry '" + backbone.front().name + "'");
    }
    assign_entries(backbone, unet->parameters());
  }
  if (!tuned.empty()) {
    if (stack == nullptr) {
      throw CheckpointError(CheckpointErrc::kLayoutMismatch,
                            "unexpected tuner entry '" + tuned.front().name + "'");
    }
    assign_entries(tuned, stack->parameters());
  }
}

}  // namespace scedit
