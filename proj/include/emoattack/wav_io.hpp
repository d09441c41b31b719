#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "emoattack/errors.hpp"
#include "emoattack/waveform.hpp"

namespace emoattack {

namespace detail {

inline std::uint32_t read_le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void put_le32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline void put_le16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

inline void put_tag(std::vector<unsigned char>& out, const char* tag) {
  out.insert(out.end(), tag, tag + 4);
}

}  // namespace detail

// RIFF/WAVE, PCM 16-bit, mono. Samples are divided by 32768.
inline Waveform decode_wav(const std::vector<unsigned char>& bytes) {
  using detail::read_le16;
  using detail::read_le32;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError("not a RIFF/WAVE file");
  }
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0, format = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t len = read_le32(hdr + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) throw FormatError("truncated WAV chunk");
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (len < 16) throw FormatError("fmt chunk too short");
      format = read_le16(bytes.data() + body);
      channels = read_le16(bytes.data() + body + 2);
      rate = read_le32(bytes.data() + body + 4);
      bits = read_le16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("data chunk before fmt chunk");
      if (format != 1) throw UnsupportedEncodingError("only PCM WAV is supported");
      if (channels != 1) throw UnsupportedEncodingError("only mono WAV is supported");
      if (bits != 16) throw UnsupportedEncodingError("only 16-bit WAV is supported");
      if (rate == 0) throw FormatError("zero sample rate");
      if (len % 2 != 0 || len == 0) throw FormatError("bad data chunk length");
      std::vector<float> samples(len / 2);
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto raw = static_cast<std::int16_t>(read_le16(bytes.data() + body + 2 * i));
        samples[i] = static_cast<float>(raw / 32768.0);
      }
      return Waveform(std::move(samples), static_cast<int>(rate));
    }
    pos = body + len + (len & 1u);
  }
  throw FormatError("WAV file has no data chunk");
}

inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes);
}

// Samples are scaled by 32768, rounded and clamped to [-32768, 32767], so
// 1.0 stores as 32767 and every PCM-grid value round-trips exactly.
inline std::vector<unsigned char> encode_wav(const Waveform& w) {
  using namespace detail;
  const auto data_len = static_cast<std::uint32_t>(w.size() * 2);
  std::vector<unsigned char> out;
  out.reserve(44 + data_len);
  put_tag(out, "RIFF");
  put_le32(out, 36 + data_len);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_le32(out, 16);
  put_le16(out, 1);
  put_le16(out, 1);
  put_le32(out, static_cast<std::uint32_t>(w.sample_rate()));
  put_le32(out, static_cast<std::uint32_t>(w.sample_rate()) * 2);
  put_le16(out, 2);
  put_le16(out, 16);
  put_tag(out, "data");
  put_le32(out, data_len);
  for (float v : w.samples()) {
    const long q = std::clamp(std::lround(static_cast<double>(v) * 32768.0), -32768L, 32767L);
    put_le16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

inline void write_wav(const Waveform& w, const std::filesystem::path& path) {
  if (w.empty()) throw DomainError("write_wav: empty waveform");
  const auto bytes = encode_wav(w);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace emoattack
