#pragma once

// Dataset directories: manifest.json plus little-endian float32 feature and
// text files, each with a small int32 header.
//
//   feature file: [frames, tokens, dim, 1] then frames*tokens*dim floats
//   text file:    [3, text_dim, 1]        then 3*text_dim floats (T_b, T_m, T_b̂)
//   embeddings:   [records, 3, dim, 1]    then records*3*dim floats

#include "disenq/world.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace disenq {

namespace fs = std::filesystem;

inline constexpr std::int32_t kFileFormatVersion = 1;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::vector<unsigned char>& out, double x) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
}

inline double get_f32(const unsigned char* p) { return static_cast<double>(std::bit_cast<float>(get_u32(p))); }

inline void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_io("cannot open ", path.string(), " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail_io("failed writing ", path.string());
}

inline std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_io("missing file ", path.string());
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Reads `count` int32 header fields followed by float32 payload of the size
// the header implies.
struct FloatBlock {
  std::vector<std::int32_t> header;
  std::vector<double> values;
};

inline FloatBlock read_float_block(const fs::path& path, std::size_t header_fields) {
  const auto bytes = read_bytes(path);
  if (bytes.size() < 4 * header_fields) fail_shape(path.string(), ": truncated header");
  FloatBlock block;
  std::size_t payload = 1;
  for (std::size_t i = 0; i < header_fields; ++i) {
    block.header.push_back(static_cast<std::int32_t>(get_u32(bytes.data() + 4 * i)));
  }
  if (block.header.back() != kFileFormatVersion) {
    fail_shape(path.string(), ": unsupported format version ", block.header.back());
  }
  for (std::size_t i = 0; i + 1 < header_fields; ++i) {
    if (block.header[i] < 0) fail_shape(path.string(), ": negative header field");
    payload *= static_cast<std::size_t>(block.header[i]);
  }
  if (bytes.size() != 4 * header_fields + 4 * payload) {
    fail_shape(path.string(), ": header promises ", payload, " floats but file holds ",
               (bytes.size() - 4 * header_fields) / 4);
  }
  block.values.resize(payload);
  for (std::size_t i = 0; i < payload; ++i) block.values[i] = get_f32(bytes.data() + 4 * (header_fields + i));
  return block;
}

}  // namespace detail

inline void write_feature_file(const fs::path& path, const std::vector<Matrix>& frames) {
  if (frames.empty()) fail_shape("cannot write a clip with no frames");
  std::vector<unsigned char> bytes;
  detail::put_u32(bytes, static_cast<std::uint32_t>(frames.size()));
  detail::put_u32(bytes, static_cast<std::uint32_t>(frames[0].rows()));
  detail::put_u32(bytes, static_cast<std::uint32_t>(frames[0].cols()));
  detail::put_u32(bytes, kFileFormatVersion);
  for (const Matrix& f : frames) {
    for (Eigen::Index r = 0; r < f.rows(); ++r) {
      for (Eigen::Index c = 0; c < f.cols(); ++c) detail::put_f32(bytes, f(r, c));
    }
  }
  detail::write_bytes(path, bytes);
}

inline std::vector<Matrix> read_feature_file(const fs::path& path) {
  const auto block = detail::read_float_block(path, 4);
  const int frames = block.header[0];
  const int tokens = block.header[1];
  const int dim = block.header[2];
  std::vector<Matrix> out;
  std::size_t at = 0;
  for (int f = 0; f < frames; ++f) {
    Matrix m(tokens, dim);
    for (int r = 0; r < tokens; ++r) {
      for (int c = 0; c < dim; ++c) m(r, c) = block.values[at++];
    }
    out.push_back(std::move(m));
  }
  return out;
}

inline void write_text_file(const fs::path& path, const TextTriplet& t) {
  std::vector<unsigned char> bytes;
  detail::put_u32(bytes, 3);
  detail::put_u32(bytes, static_cast<std::uint32_t>(t.dim()));
  detail::put_u32(bytes, kFileFormatVersion);
  for (int s = 0; s < 3; ++s) {
    for (Eigen::Index i = 0; i < t.dim(); ++i) detail::put_f32(bytes, t.stream(s)(i));
  }
  detail::write_bytes(path, bytes);
}

inline TextTriplet read_text_file(const fs::path& path) {
  const auto block = detail::read_float_block(path, 3);
  if (block.header[0] != 3) fail_shape(path.string(), ": text file must hold 3 vectors, header says ", block.header[0]);
  const int d = block.header[1];
  std::array<Vector, 3> v;
  for (int s = 0; s < 3; ++s) {
    v[static_cast<std::size_t>(s)].resize(d);
    for (int i = 0; i < d; ++i) v[static_cast<std::size_t>(s)](i) = block.values[static_cast<std::size_t>(s * d + i)];
  }
  return TextTriplet(v[0], v[1], v[2]);
}

// Writes manifest.json plus one feature file (and text file, when present) per clip.
inline void write_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir / "features");
  nlohmann::json clips = nlohmann::json::array();
  const bool with_text = !ds.texts.empty();
  if (with_text) fs::create_directories(dir / "text");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const VideoSample& s = ds.samples[i];
    const std::string feature_file = "features/" + s.clip_id + ".bin";
    write_feature_file(dir / feature_file, s.frames);
    nlohmann::json rec = {{"clip_id", s.clip_id}, {"identity", s.identity}, {"action", s.action},
                          {"clothing", s.clothing}, {"view", s.view},   {"key_frame_index", s.key_frame_index},
                          {"feature_file", feature_file}};
    if (with_text && ds.texts[i].has_value()) {
      const std::string text_file = "text/" + s.clip_id + ".bin";
      write_text_file(dir / text_file, *ds.texts[i]);
      rec["text_file"] = text_file;
    }
    clips.push_back(std::move(rec));
  }
  nlohmann::json manifest = {{"version", kFileFormatVersion},
                             {"frames_per_clip", ds.frames_per_clip},
                             {"tokens_per_frame", ds.tokens_per_frame},
                             {"token_dim", ds.token_dim},
                             {"text_dim", ds.text_dim},
                             {"num_identities", ds.num_identities},
                             {"num_actions", ds.num_actions},
                             {"num_clothing", ds.num_clothing},
                             {"num_views", ds.num_views},
                             {"clips", std::move(clips)}};
  std::ofstream out(dir / "manifest.json");
  if (!out) fail_io("cannot write ", (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

// Picks `count` frames `stride` apart starting at a random offset; clips too
// short for the full span are sampled with wrap-around.
inline std::vector<Matrix> sample_frames(const std::vector<Matrix>& frames, int count, int stride, Rng& rng) {
  if (frames.empty()) fail_shape("cannot sample frames from an empty clip");
  const int n = static_cast<int>(frames.size());
  const int span = (count - 1) * stride + 1;
  const int max_start = std::max(0, n - span);
  std::uniform_int_distribution<int> start_dist(0, max_start);
  const int start = start_dist(rng);
  std::vector<Matrix> out;
  for (int i = 0; i < count; ++i) out.push_back(frames[static_cast<std::size_t>((start + i * stride) % n)]);
  return out;
}

// Loads a dataset directory (or its manifest.json path). When the manifest
// sets "frame_stride", clips may hold any number of frames and are sampled
// down to frames_per_clip; otherwise every clip must match exactly.
inline Dataset ingest_manifest(const fs::path& path) {
  const fs::path manifest_path = fs::is_directory(path) ? path / "manifest.json" : path;
  const fs::path root = manifest_path.parent_path();
  std::ifstream in(manifest_path);
  if (!in) fail_io("missing manifest ", manifest_path.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    fail_io("manifest ", manifest_path.string(), " is not valid JSON: ", e.what());
  }
  Dataset ds;
  try {
    ds.frames_per_clip = m.at("frames_per_clip").get<int>();
    ds.tokens_per_frame = m.at("tokens_per_frame").get<int>();
    ds.token_dim = m.at("token_dim").get<int>();
    ds.text_dim = m.value("text_dim", 0);
    ds.num_identities = m.at("num_identities").get<int>();
    ds.num_actions = m.at("num_actions").get<int>();
    ds.num_clothing = m.value("num_clothing", 1);
    ds.num_views = m.value("num_views", 1);
  } catch (const nlohmann::json::exception& e) {
    fail_validation("manifest header incomplete: ", e.what());
  }
  const bool sampled = m.contains("frame_stride");
  const int stride = m.value("frame_stride", 1);
  const std::uint64_t sampling_seed = m.value("sampling_seed", std::uint64_t{0});
  if (!m.contains("clips") || !m["clips"].is_array()) fail_validation("manifest has no clips array");

  std::size_t index = 0;
  for (const auto& rec : m["clips"]) {
    VideoSample s;
    std::string feature_file;
    try {
      s.clip_id = rec.at("clip_id").get<std::string>();
      s.identity = rec.at("identity").get<int>();
      s.action = rec.at("action").get<int>();
      s.clothing = rec.value("clothing", 0);
      s.view = rec.value("view", 0);
      feature_file = rec.at("feature_file").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      fail_validation("manifest record ", index, " malformed: ", e.what());
    }
    auto check_label = [&](int v, int limit, const char* name) {
      if (v < 0 || v >= limit) fail_validation("clip ", s.clip_id, ": unknown ", name, " label ", v, " (expected < ", limit, ")");
    };
    check_label(s.identity, ds.num_identities, "identity");
    check_label(s.action, ds.num_actions, "action");
    check_label(s.clothing, ds.num_clothing, "clothing");
    check_label(s.view, ds.num_views, "view");

    std::vector<Matrix> frames = read_feature_file(root / feature_file);
    if (frames.empty()) fail_shape("clip ", s.clip_id, " has no frames");
    if (frames[0].rows() != ds.tokens_per_frame || frames[0].cols() != ds.token_dim) {
      fail_shape("clip ", s.clip_id, ": tokens x dim ", frames[0].rows(), "x", frames[0].cols(), " != header ",
                 ds.tokens_per_frame, "x", ds.token_dim);
    }
    if (sampled) {
      Rng rng(derive_seed(sampling_seed, index));
      frames = sample_frames(frames, ds.frames_per_clip, stride, rng);
    } else if (static_cast<int>(frames.size()) != ds.frames_per_clip) {
      fail_shape("clip ", s.clip_id, ": ", frames.size(), " frames but header frames_per_clip is ", ds.frames_per_clip);
    }
    s.frames = std::move(frames);
    s.key_frame_index = rec.value("key_frame_index", default_key_frame(ds.frames_per_clip));
    if (s.key_frame_index < 0 || s.key_frame_index >= ds.frames_per_clip) {
      fail_validation("clip ", s.clip_id, ": key_frame_index out of range");
    }

    std::optional<TextTriplet> text;
    if (rec.contains("text_file")) {
      text = read_text_file(root / rec["text_file"].get<std::string>());
      if (ds.text_dim == 0) ds.text_dim = static_cast<int>(text->dim());
      if (text->dim() != ds.text_dim) fail_shape("clip ", s.clip_id, ": text dim ", text->dim(), " != ", ds.text_dim);
    }
    ds.samples.push_back(std::move(s));
    ds.texts.push_back(std::move(text));
    ++index;
  }
  if (ds.samples.empty()) fail_validation("manifest lists no clips");
  return ds;
}

// ---------------------------------------------------------------------------
// Embedding export

struct EmbeddingRecord {
  std::string clip_id;
  int identity = 0;
  int action = 0;
  int clothing = 0;
  int view = 0;
  std::array<RowVector, 3> features;  // F_b, F_m, F_b̂
};

inline void write_embeddings(const fs::path& path, const std::vector<EmbeddingRecord>& records) {
  if (records.empty()) fail_validation("no embeddings to export");
  const Eigen::Index dim = records[0].features[0].size();
  std::vector<unsigned char> bytes;
  detail::put_u32(bytes, static_cast<std::uint32_t>(records.size()));
  detail::put_u32(bytes, 3);
  detail::put_u32(bytes, static_cast<std::uint32_t>(dim));
  detail::put_u32(bytes, kFileFormatVersion);
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& r : records) {
    for (const auto& f : r.features) {
      if (f.size() != dim) fail_shape("embedding dims differ between records");
      for (Eigen::Index i = 0; i < dim; ++i) detail::put_f32(bytes, f(i));
    }
    labels.push_back({{"clip_id", r.clip_id}, {"identity", r.identity}, {"action", r.action},
                      {"clothing", r.clothing}, {"view", r.view}});
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  detail::write_bytes(path, bytes);
  fs::path sidecar = path;
  sidecar += ".labels.json";
  std::ofstream out(sidecar);
  if (!out) fail_io("cannot write ", sidecar.string());
  out << nlohmann::json{{"streams", {"biometrics", "motion", "non_biometrics"}}, {"records", labels}}.dump(2) << '\n';
}

inline std::vector<EmbeddingRecord> read_embeddings(const fs::path& path) {
  const auto block = detail::read_float_block(path, 4);
  if (block.header[1] != 3) fail_shape(path.string(), ": expected 3 feature blocks per record");
  const int n = block.header[0];
  const int dim = block.header[2];
  fs::path sidecar = path;
  sidecar += ".labels.json";
  std::ifstream in(sidecar);
  if (!in) fail_io("missing labels sidecar ", sidecar.string());
  nlohmann::json labels;
  in >> labels;
  const auto& recs = labels.at("records");
  if (static_cast<int>(recs.size()) != n) fail_shape("labels sidecar lists ", recs.size(), " records, file has ", n);
  std::vector<EmbeddingRecord> out(static_cast<std::size_t>(n));
  std::size_t at = 0;
  for (int r = 0; r < n; ++r) {
    auto& rec = out[static_cast<std::size_t>(r)];
    const auto& l = recs[static_cast<std::size_t>(r)];
    rec.clip_id = l.at("clip_id").get<std::string>();
    rec.identity = l.at("identity").get<int>();
    rec.action = l.at("action").get<int>();
    rec.clothing = l.at("clothing").get<int>();
    rec.view = l.at("view").get<int>();
    for (auto& f : rec.features) {
      f.resize(dim);
      for (int i = 0; i < dim; ++i) f(i) = block.values[at++];
    }
  }
  return out;
}

}  // namespace disenq
