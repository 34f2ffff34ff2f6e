// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "meit/common.hpp"
#include "meit/encoder.hpp"
#include "meit/mat.hpp"
#include "meit/model.hpp"

namespace meit {

// Container: "MEITCKPT" | u32 version | u64 json_len | json | u32 n_tensors |
// { u16 name_len | name | u32 ndim | u64 dims.. | f64 data.. } | u32 crc32
// (crc covers everything between the magic and itself).

struct CheckpointData {
  nlohmann::json meta;
  std::map<std::string, Mat> tensors;  // flattened as [rows x cols]
};

constexpr uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const CheckpointData& ckpt) {
  std::string body;
  put_le<uint32_t>(body, kCheckpointVersion);
  const std::string js = ckpt.meta.dump();
  put_le<uint64_t>(body, js.size());
  body += js;
  put_le<uint32_t>(body, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, m] : ckpt.tensors) {
    put_le<uint16_t>(body, static_cast<uint16_t>(name.size()));
    body += name;
    put_le<uint32_t>(body, 2);
    put_le<uint64_t>(body, static_cast<uint64_t>(m.rows));
    put_le<uint64_t>(body, static_cast<uint64_t>(m.cols));
    const size_t off = body.size();
    body.resize(off + m.d.size() * sizeof(double));
    std::memcpy(body.data() + off, m.d.data(), m.d.size() * sizeof(double));
  }
  std::string out = "MEITCKPT";
  out += body;
  put_le<uint32_t>(out, crc32(body.data(), body.size()));
  return out;
}

inline CheckpointData decode_checkpoint(const std::string& buf) {
  if (buf.size() < 12 || buf.compare(0, 8, "MEITCKPT") != 0)
    throw ParseError(ParseError::Kind::bad_magic, "not a MEITCKPT file");
  const size_t body_len = buf.size() - 12;
  const uint32_t want = crc32(buf.data() + 8, body_len);
  size_t tail = 8 + body_len;
  uint32_t got;
  std::memcpy(&got, buf.data() + tail, 4);
  if (want != got) throw ParseError(ParseError::Kind::checksum, "checkpoint checksum mismatch");

  size_t off = 8;
  CheckpointData ckpt;
  const uint32_t version = get_le<uint32_t>(buf, off);
  if (version != kCheckpointVersion)
    throw ParseError(ParseError::Kind::incompatible,
                     "unsupported checkpoint version " + std::to_string(version));
  const uint64_t js_len = get_le<uint64_t>(buf, off);
  if (off + js_len > buf.size()) throw ParseError(ParseError::Kind::truncated, "json block truncated");
  ckpt.meta = nlohmann::json::parse(buf.substr(off, js_len));
  off += js_len;
  const uint32_t n = get_le<uint32_t>(buf, off);
  for (uint32_t i = 0; i < n; ++i) {
    const uint16_t name_len = get_le<uint16_t>(buf, off);
    if (off + name_len > buf.size())
      throw ParseError(ParseError::Kind::truncated, "tensor name truncated");
    const std::string name = buf.substr(off, name_len);
    off += name_len;
    const uint32_t ndim = get_le<uint32_t>(buf, off);
    if (ndim != 2) throw ParseError(ParseError::Kind::bad_header, "tensors must be rank 2");
    const uint64_t rows = get_le<uint64_t>(buf, off);
    const uint64_t cols = get_le<uint64_t>(buf, off);
    Mat m(static_cast<int>(rows), static_cast<int>(cols));
    const size_t bytes = m.d.size() * sizeof(double);
    if (off + bytes > buf.size())
      throw ParseError(ParseError::Kind::truncated, "tensor payload truncated");
    std::memcpy(m.d.data(), buf.data() + off, bytes);
    off += bytes;
    ckpt.tensors.emplace(name, std::move(m));
  }
  return ckpt;
}

inline void write_checkpoint_file(const CheckpointData& ckpt, const std::string& path) {
  const std::string buf = encode_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("short write: " + path);
}

inline CheckpointData read_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace meit
