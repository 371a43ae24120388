#pragma once

// Binary checkpoints. Layout (little-endian):
//   "DSNQCKPT" u32 version u64 config_hash
//   str config_json  i32 epoch  str rng_state  u64 optimizer_steps  u32 has_moments
//   u32 count, then per parameter: str name  u32 rows  u32 cols  f64 value[]  (f64 m[] f64 v[] if has_moments)
// Strings are u32 length + bytes.

#include "disenq/io.hpp"
#include "disenq/model.hpp"

#include <sstream>

namespace disenq {

inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'N', 'Q', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  Model model;
  AdamW optimizer;
  int epoch = 0;
  Rng rng;
};

namespace detail {

class Writer {
 public:
  void u32(std::uint32_t v) { put_u32(bytes, v); }
  void u64(std::uint64_t v) {
    u32(static_cast<std::uint32_t>(v));
    u32(static_cast<std::uint32_t>(v >> 32));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double x) { u64(std::bit_cast<std::uint64_t>(x)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void matrix_data(const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
    }
  }
  std::vector<unsigned char> bytes;
};

class Reader {
 public:
  Reader(const std::vector<unsigned char>& b, std::string source) : bytes_(b), source_(std::move(source)) {}
  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) fail_io(source_, ": truncated checkpoint");
  }
  std::uint32_t u32() {
    need(4);
    const std::uint32_t v = get_u32(bytes_.data() + pos_);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  Matrix matrix_data(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = f64();
    }
    return m;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<unsigned char>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const RunConfig& cfg, Model& model, const AdamW& optimizer,
                                                       int epoch, const Rng& rng) {
  detail::Writer w;
  w.bytes.insert(w.bytes.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  w.u32(kCheckpointVersion);
  w.u64(config_hash(cfg));
  w.str(serialize_config(cfg));
  w.i32(epoch);
  std::ostringstream rs;
  rs << rng;
  w.str(rs.str());
  w.u64(optimizer.steps());
  const ParameterRefs params = model.parameters();
  const bool has_moments = !optimizer.first_moments().empty();
  if (has_moments && optimizer.first_moments().size() != params.size()) {
    throw std::logic_error("optimizer state does not match parameter list");
  }
  w.u32(has_moments ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = *params[i];
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.rows()));
    w.u32(static_cast<std::uint32_t>(p.value.cols()));
    w.matrix_data(p.value);
    if (has_moments) {
      w.matrix_data(optimizer.first_moments()[i]);
      w.matrix_data(optimizer.second_moments()[i]);
    }
  }
  return w.bytes;
}

inline void save_checkpoint(const fs::path& path, const RunConfig& cfg, Model& model, const AdamW& optimizer, int epoch,
                            const Rng& rng) {
  // Write then rename so an interrupted save never clobbers the last good file.
  const fs::path tmp = path.string() + ".tmp";
  detail::write_bytes(tmp, serialize_checkpoint(cfg, model, optimizer, epoch, rng));
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail_io("cannot move checkpoint into place at ", path.string(), ": ", ec.message());
}

// `expected_hash`, when given, must equal the stored config hash.
inline Checkpoint load_checkpoint(const fs::path& path, std::optional<std::uint64_t> expected_hash = std::nullopt) {
  if (!fs::exists(path)) fail_io("checkpoint not found: ", path.string());
  const std::vector<unsigned char> bytes = detail::read_bytes(path);
  detail::Reader r(bytes, path.string());
  r.need(sizeof(kCheckpointMagic));
  if (!std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), bytes.begin())) {
    fail_io(path.string(), ": not a checkpoint file");
  }
  detail::Reader& body = r;
  (void)body.u64();  // magic
  const std::uint32_t version = body.u32();
  if (version != kCheckpointVersion) fail_io(path.string(), ": unsupported checkpoint version ", version);
  const std::uint64_t stored_hash = body.u64();
  if (expected_hash && *expected_hash != stored_hash) {
    fail_validation(path.string(), ": checkpoint was written for a different config (hash mismatch)");
  }
  Checkpoint ck;
  ck.config = parse_config(body.str());
  if (config_hash(ck.config) != stored_hash) fail_io(path.string(), ": stored config does not match its hash");
  ck.epoch = body.i32();
  {
    std::istringstream rs(body.str());
    rs >> ck.rng;
    if (!rs) fail_io(path.string(), ": corrupt RNG state");
  }
  const std::uint64_t steps = body.u64();
  const bool has_moments = body.u32() != 0;
  const std::uint32_t count = body.u32();

  struct Entry {
    std::string name;
    Matrix value, m, v;
  };
  std::vector<Entry> entries(count);
  for (auto& e : entries) {
    e.name = body.str();
    const auto rows = static_cast<Eigen::Index>(body.u32());
    const auto cols = static_cast<Eigen::Index>(body.u32());
    e.value = body.matrix_data(rows, cols);
    if (has_moments) {
      e.m = body.matrix_data(rows, cols);
      e.v = body.matrix_data(rows, cols);
    }
  }
  if (!body.done()) fail_io(path.string(), ": trailing bytes after checkpoint payload");

  auto classes_of = [&](const std::string& name) -> int {
    for (const auto& e : entries) {
      if (e.name == name) return static_cast<int>(e.value.cols());
    }
    fail_io(path.string(), ": missing parameter ", name);
  };
  ck.model = Model(ck.config, classes_of("head.identity.w"), classes_of("head.action.w"));
  const ParameterRefs params = ck.model.parameters();
  if (params.size() != entries.size()) {
    fail_io(path.string(), ": has ", entries.size(), " parameters, model expects ", params.size());
  }
  std::vector<Matrix> m, v;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    const Entry& e = entries[i];
    if (p.name != e.name) fail_io(path.string(), ": parameter ", i, " is ", e.name, ", expected ", p.name);
    if (p.value.rows() != e.value.rows() || p.value.cols() != e.value.cols()) {
      fail_io(path.string(), ": shape mismatch for ", p.name);
    }
    p.value = e.value;
    if (has_moments) {
      m.push_back(e.m);
      v.push_back(e.v);
    }
  }
  ck.optimizer = AdamW(ck.config.optimizer);
  ck.optimizer.restore(steps, std::move(m), std::move(v));
  return ck;
}

}  // namespace disenq
