#include "spinecobb/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "spinecobb/data.hpp"

namespace spinecobb {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'P', 'C', 'K', 'P', 'T', '0', '1'};

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw IoError("checkpoint is truncated");
  }
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const ParameterSet& params, const CheckpointMeta& meta) {
  nlohmann::json m{{"role", std::string(role_name(params.role()))},
                   {"config_hash", meta.config_hash},
                   {"stage", meta.stage},
                   {"epoch", meta.epoch},
                   {"seed", meta.seed},
                   {"gate_active", meta.gate_active},
                   {"parameter_hash", hex64(params.hash())},
                   {"config", meta.config}};
  const std::string ms = m.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint64_t>(out, ms.size());
  out += ms;
  put<std::uint64_t>(out, params.entries().size());
  for (const auto& [name, arr] : params.entries()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(arr.shape.size()));
    for (int d : arr.shape) put<std::int32_t>(out, d);
    put<std::uint64_t>(out, arr.values.size());
    out.append(reinterpret_cast<const char*>(arr.values.data()), arr.values.size() * sizeof(double));
  }
  return out;
}

ParameterSet decode_checkpoint(std::string_view bytes, CheckpointMeta* meta) {
  Reader r(bytes);
  if (r.bytes(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic)))
    throw IoError("not a checkpoint file (bad magic)");
  const auto meta_len = r.get<std::uint64_t>();
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint metadata: ") + e.what());
  }
  const std::string role = m.at("role").get<std::string>();
  ParameterSet params(role == role_name(NetworkRole::Regressor) ? NetworkRole::Regressor
                                                                : NetworkRole::Segmenter);
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(r.bytes(r.get<std::uint32_t>()));
    const auto ndim = r.get<std::uint32_t>();
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = r.get<std::int32_t>();
    const auto numel = r.get<std::uint64_t>();
    ParamArray& arr = params.add(name, shape);
    if (arr.values.size() != numel) throw IoError("checkpoint entry '" + name + "' has inconsistent size");
    const auto raw = r.bytes(numel * sizeof(double));
    std::memcpy(arr.values.data(), raw.data(), raw.size());
  }
  if (!r.done()) throw IoError("checkpoint has trailing bytes");
  if (m.contains("parameter_hash") && m.at("parameter_hash").get<std::string>() != hex64(params.hash()))
    throw IoError("checkpoint content hash mismatch");

  if (meta) {
    meta->config_hash = m.at("config_hash").get<std::string>();
    meta->stage = m.at("stage").get<int>();
    meta->epoch = m.at("epoch").get<int>();
    meta->seed = m.at("seed").get<std::uint64_t>();
    meta->gate_active = m.at("gate_active").get<bool>();
    meta->config = m.at("config");
  }
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, const CheckpointMeta& meta) {
  data::write_file_atomic(path, encode_checkpoint(params, meta));
}

ParameterSet load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, meta);
}

}  // namespace spinecobb
