#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "espex/dsp.hpp"
#include "espex/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

namespace espex {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// WAV (16-bit PCM, mono)
// ---------------------------------------------------------------------------

namespace io_detail {
inline void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u16(std::ostream& os, uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); }
}  // namespace io_detail

inline void write_wav(const fs::path& path, const AudioSignal& sig) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "write_wav: cannot open " + path.string());
  const uint32_t n = static_cast<uint32_t>(sig.samples.size());
  const uint32_t data_bytes = n * 2;
  os.write("RIFF", 4);
  io_detail::put_u32(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  io_detail::put_u32(os, 16);
  io_detail::put_u16(os, 1);  // PCM
  io_detail::put_u16(os, 1);  // mono
  io_detail::put_u32(os, static_cast<uint32_t>(sig.sample_rate));
  io_detail::put_u32(os, static_cast<uint32_t>(sig.sample_rate) * 2);
  io_detail::put_u16(os, 2);
  io_detail::put_u16(os, 16);
  os.write("data", 4);
  io_detail::put_u32(os, data_bytes);
  for (double v : sig.samples) {
    double scaled = v * 32767.0;
    scaled = std::max(-32768.0, std::min(32767.0, std::nearbyint(scaled)));
    const int16_t q = static_cast<int16_t>(scaled);
    os.write(reinterpret_cast<const char*>(&q), 2);
  }
  check(os.good(), "write_wav: write failed for " + path.string());
}

inline AudioSignal read_wav(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "read_wav: cannot open " + path.string());
  char tag[4];
  uint32_t u32;
  is.read(tag, 4);
  check(is.good() && std::memcmp(tag, "RIFF", 4) == 0, "read_wav: not a RIFF file");
  is.read(reinterpret_cast<char*>(&u32), 4);
  is.read(tag, 4);
  check(std::memcmp(tag, "WAVE", 4) == 0, "read_wav: not a WAVE file");

  AudioSignal out;
  uint16_t channels = 0, bits = 0;
  bool got_fmt = false;
  while (is.read(tag, 4)) {
    uint32_t size = 0;
    is.read(reinterpret_cast<char*>(&size), 4);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      uint16_t fmt;
      uint32_t rate, byte_rate;
      uint16_t block;
      is.read(reinterpret_cast<char*>(&fmt), 2);
      is.read(reinterpret_cast<char*>(&channels), 2);
      is.read(reinterpret_cast<char*>(&rate), 4);
      is.read(reinterpret_cast<char*>(&byte_rate), 4);
      is.read(reinterpret_cast<char*>(&block), 2);
      is.read(reinterpret_cast<char*>(&bits), 2);
      check(fmt == 1 && channels == 1 && bits == 16, "read_wav: only 16-bit PCM mono supported");
      out.sample_rate = static_cast<int>(rate);
      if (size > 16) is.seekg(size - 16, std::ios::cur);
      got_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      check(got_fmt, "read_wav: data chunk before fmt");
      const uint32_t n = size / 2;
      out.samples.resize(n);
      std::vector<int16_t> raw(n);
      is.read(reinterpret_cast<char*>(raw.data()), size);
      check(is.good(), "read_wav: truncated data chunk");
      for (uint32_t i = 0; i < n; ++i) out.samples[i] = raw[i] / 32767.0;
      return out;
    } else {
      is.seekg(size + (size & 1), std::ios::cur);
    }
  }
  check(false, "read_wav: no data chunk in " + path.string());
  return out;
}

// ---------------------------------------------------------------------------
// EEG interchange: raw little-endian f32, row-major [channels x time],
// with a JSON sidecar {channels, sample_rate, trial_id, subject_id}.
// ---------------------------------------------------------------------------

inline void write_eeg(const fs::path& bin_path, const fs::path& json_path,
                      const EEGRecording& rec, int subject_id, int trial_id) {
  std::ofstream os(bin_path, std::ios::binary);
  check(os.good(), "write_eeg: cannot open " + bin_path.string());
  for (double v : rec.data) {
    const float f = static_cast<float>(v);
    os.write(reinterpret_cast<const char*>(&f), 4);
  }
  check(os.good(), "write_eeg: write failed");
  json side = {{"channels", rec.channels},
               {"sample_rate", rec.sample_rate},
               {"trial_id", trial_id},
               {"subject_id", subject_id}};
  std::ofstream js(json_path);
  js << side.dump(2) << "\n";
  check(js.good(), "write_eeg: sidecar write failed");
}

inline EEGRecording read_eeg(const fs::path& bin_path, const fs::path& json_path,
                             int* subject_id = nullptr, int* trial_id = nullptr) {
  std::ifstream js(json_path);
  check(js.good(), "read_eeg: missing sidecar " + json_path.string());
  json side = json::parse(js);
  EEGRecording rec;
  rec.channels = side.at("channels").get<long>();
  rec.sample_rate = side.at("sample_rate").get<int>();
  if (subject_id) *subject_id = side.at("subject_id").get<int>();
  if (trial_id) *trial_id = side.at("trial_id").get<int>();

  std::ifstream is(bin_path, std::ios::binary | std::ios::ate);
  check(is.good(), "read_eeg: cannot open " + bin_path.string());
  const auto bytes = static_cast<long>(is.tellg());
  check(bytes % (4 * rec.channels) == 0, "read_eeg: size not a multiple of channel count");
  rec.samples = bytes / 4 / rec.channels;
  is.seekg(0);
  std::vector<float> raw(static_cast<size_t>(rec.channels * rec.samples));
  is.read(reinterpret_cast<char*>(raw.data()), bytes);
  check(is.good(), "read_eeg: truncated file");
  rec.data.assign(raw.begin(), raw.end());
  return rec;
}

// ---------------------------------------------------------------------------
// Parameter serialization: flat little-endian f32 blob + JSON index
// {name -> (offset, shape)}; offsets count elements.
// ---------------------------------------------------------------------------

inline void write_f32_blob(const fs::path& path, const std::vector<float>& data) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "write_f32_blob: cannot open " + path.string());
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * 4));
  check(os.good(), "write_f32_blob: write failed");
}

inline std::vector<float> read_f32_blob(const fs::path& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  check(is.good(), "read_f32_blob: cannot open " + path.string());
  const auto bytes = static_cast<long>(is.tellg());
  check(bytes % 4 == 0, "read_f32_blob: size not a multiple of 4");
  is.seekg(0);
  std::vector<float> out(static_cast<size_t>(bytes / 4));
  is.read(reinterpret_cast<char*>(out.data()), bytes);
  check(is.good(), "read_f32_blob: truncated file");
  return out;
}

template <typename S>
void save_params(nn::ParamRegistry<S>& reg, const fs::path& bin_path, json& index) {
  std::vector<float> blob;
  blob.reserve(static_cast<size_t>(reg.total_elements()));
  index = json::object();
  for (size_t i = 0; i < reg.size(); ++i) {
    auto& p = reg.at(i);
    index[p.name] = {{"offset", blob.size()}, {"shape", p.tensor.shape()}};
    for (S v : p.tensor.value()) blob.push_back(static_cast<float>(v));
  }
  write_f32_blob(bin_path, blob);
}

template <typename S>
void load_params(nn::ParamRegistry<S>& reg, const fs::path& bin_path, const json& index) {
  const auto blob = read_f32_blob(bin_path);
  for (size_t i = 0; i < reg.size(); ++i) {
    auto& p = reg.at(i);
    check(index.contains(p.name), "load_params: missing parameter " + p.name);
    const auto& entry = index.at(p.name);
    const auto shape = entry.at("shape").template get<std::vector<long>>();
    check(shape == p.tensor.shape(),
          "load_params: shape mismatch for " + p.name + ": file " + shape_str(shape) +
              " vs model " + shape_str(p.tensor.shape()));
    const size_t off = entry.at("offset").template get<size_t>();
    check(off + static_cast<size_t>(p.tensor.numel()) <= blob.size(),
          "load_params: blob too small for " + p.name);
    auto& v = p.tensor.value();
    for (size_t j = 0; j < v.size(); ++j) v[j] = static_cast<S>(blob[off + j]);
  }
}

}  // namespace espex
