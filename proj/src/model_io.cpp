// SPDX-License-Identifier: Apache-2.0
#include "reseg/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "reseg/errors.hpp"

namespace reseg {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'R', 'E', 'S', 'E', 'G', 'M', 'D', 'L'};
constexpr std::uint8_t kDtypeF32 = 1;
constexpr std::uint8_t kDtypeF64 = 2;
constexpr std::uint8_t kFlagFrozen = 1;
constexpr std::uint8_t kFlagDecays = 2;

class Writer {
 public:
  template <typename U>
  void uint(U v) {
    for (std::size_t b = 0; b < sizeof(U); ++b) out_.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { out_.append(s); }
  void text32(std::string_view s) {
    uint<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void tensor(std::string_view id, const Tensor& t, std::uint8_t flags) {
    text32(id);
    uint<std::uint8_t>(kDtypeF32);
    uint<std::uint8_t>(flags);
    uint<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) uint<std::uint64_t>(e);
    for (float v : t.values()) f32(v);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : in_(bytes) {}

  void need(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw TruncatedError(std::string("model file ends inside ") + what + " at byte " + std::to_string(pos_));
    }
  }
  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) {
      v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(in_[pos_ + b])) << (8 * b));
    }
    pos_ += sizeof(U);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string text32(const char* what) {
    const auto n = uint<std::uint32_t>(what);
    return std::string(bytes(n, what));
  }

  struct Record {
    std::string id;
    std::uint8_t flags;
    Tensor value;
  };

  Record tensor() {
    Record r;
    r.id = text32("a parameter id");
    const auto dtype = uint<std::uint8_t>("a dtype");
    if (dtype != kDtypeF32 && dtype != kDtypeF64) {
      throw FormatError("parameter '" + r.id + "' has unknown dtype " + std::to_string(dtype));
    }
    r.flags = uint<std::uint8_t>("parameter flags");
    const auto rank = uint<std::uint32_t>("a rank");
    if (rank == 0 || rank > 8) throw FormatError("parameter '" + r.id + "' has invalid rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& e : shape) {
      e = uint<std::uint64_t>("an extent");
      if (e == 0 || e > (std::uint64_t{1} << 32)) throw FormatError("parameter '" + r.id + "' has invalid extents");
      count *= e;
    }
    const std::size_t width = dtype == kDtypeF32 ? 4 : 8;
    if (count > (in_.size() - pos_) / width) {
      throw TruncatedError("model file ends inside the values of '" + r.id + "'");
    }
    r.value = Tensor(shape);
    for (std::size_t i = 0; i < count; ++i) {
      r.value[i] = dtype == kDtypeF32 ? std::bit_cast<float>(uint<std::uint32_t>("values"))
                                      : static_cast<float>(f64("values"));
    }
    return r;
  }

  bool at_end() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes(std::string_view(kMagic, sizeof kMagic));
  w.uint<std::uint32_t>(kModelFormatVersion);
  const std::string config = to_json_text(c.model.config());
  w.uint<std::uint64_t>(config.size());
  w.bytes(config);

  const auto& params = c.model.parameters();
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.tensor(p.id, p.value,
             static_cast<std::uint8_t>((p.frozen ? kFlagFrozen : 0) | (p.decays ? kFlagDecays : 0)));
  }

  w.uint<std::uint8_t>(c.optimizer ? 1 : 0);
  if (c.optimizer) {
    const auto& o = *c.optimizer;
    w.f64(o.rho);
    w.f64(o.eps);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(o.sq_grad.size() + o.sq_update.size()));
    for (const auto& [id, t] : o.sq_grad) w.tensor("sq_grad/" + id, t, 0);
    for (const auto& [id, t] : o.sq_update) w.tensor("sq_update/" + id, t, 0);
  }
  w.uint<std::uint64_t>(c.epoch);
  w.f64(c.best_score);
  return w.take();
}

Checkpoint deserialize_checkpoint(std::string_view bytes, const ModelConfig* expected) {
  Reader r(bytes);
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw FormatError("not a model file (bad magic bytes)");
  }
  r.bytes(sizeof kMagic, "the magic");
  const auto version = r.uint<std::uint32_t>("the format version");
  if (version != kModelFormatVersion) {
    throw VersionError("model file format version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kModelFormatVersion) + ")");
  }
  const auto config_len = r.uint<std::uint64_t>("the config length");
  if (config_len > r.remaining()) throw TruncatedError("model file ends inside the config block");
  const std::string_view config_text = r.bytes(static_cast<std::size_t>(config_len), "the config block");
  ModelConfig stored;
  try {
    stored = model_config_from_json(config_text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model file holds an unreadable config: ") + e.what());
  }

  const auto count = r.uint<std::uint32_t>("the parameter count");
  std::vector<Parameter<float>> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto rec = r.tensor();
    params.push_back({std::move(rec.id), std::move(rec.value), (rec.flags & kFlagFrozen) != 0,
                      (rec.flags & kFlagDecays) != 0});
  }

  std::optional<AdadeltaState> optimizer;
  const auto has_optimizer = r.uint<std::uint8_t>("the optimizer flag");
  if (has_optimizer > 1) throw FormatError("invalid optimizer flag");
  if (has_optimizer) {
    AdadeltaState o;
    o.rho = r.f64("optimizer constants");
    o.eps = r.f64("optimizer constants");
    const auto n = r.uint<std::uint32_t>("the optimizer record count");
    for (std::uint32_t i = 0; i < n; ++i) {
      auto rec = r.tensor();
      if (rec.id.rfind("sq_grad/", 0) == 0) {
        o.sq_grad.emplace(rec.id.substr(8), std::move(rec.value));
      } else if (rec.id.rfind("sq_update/", 0) == 0) {
        o.sq_update.emplace(rec.id.substr(10), std::move(rec.value));
      } else {
        throw FormatError("unexpected optimizer record '" + rec.id + "'");
      }
    }
    optimizer = std::move(o);
  }
  const auto epoch = r.uint<std::uint64_t>("the epoch counter");
  const double best = r.f64("the best score");
  if (!r.at_end()) throw FormatError(std::to_string(r.remaining()) + " unexpected trailing bytes in model file");

  Checkpoint c;
  try {
    c.model = assemble_model<float>(expected ? *expected : stored, std::move(params));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model file holds an invalid architecture: ") + e.what());
  }
  if (optimizer) {
    for (const auto& p : c.model.parameters()) {
      for (const auto* acc : {&optimizer->sq_grad, &optimizer->sq_update}) {
        auto it = acc->find(p.id);
        if (it != acc->end() && it->second.shape() != p.value.shape()) {
          throw ShapeError("optimizer state for '" + p.id + "' has shape " + to_string(it->second.shape()));
        }
      }
    }
  }
  c.optimizer = std::move(optimizer);
  c.epoch = epoch;
  c.best_score = best;
  return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
  const std::string bytes = serialize_checkpoint(checkpoint);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' into place: " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
  return deserialize_checkpoint(read_file(path));
}

Checkpoint load_checkpoint(const fs::path& path, const ModelConfig& expected) {
  return deserialize_checkpoint(read_file(path), &expected);
}

void save_model(const Model& model, const fs::path& path) {
  Checkpoint c;
  c.model = model;
  save_checkpoint(path, c);
}

Model load_model(const fs::path& path) {
  return load_checkpoint(path).model;
}

Model load_model(const fs::path& path, const ModelConfig& expected) {
  return load_checkpoint(path, expected).model;
}

}  // namespace reseg
