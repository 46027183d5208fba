// io.hpp -- hashing, file, CSV/SVG and threading utilities.
#pragma once

#include <array>
#include <atomic>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "common.hpp"

namespace mfl::io {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// SHA-256 (FIPS 180-4), used for content-addressed caching and manifests.
// ---------------------------------------------------------------------------
class Sha256 {
 public:
  Sha256() { reset(); }

  void reset() {
    h_ = {0x6a09e667u, 0xbb67ae85u, 0x3c6ef372u, 0xa54ff53au,
          0x510e527fu, 0x9b05688cu, 0x1f83d9abu, 0x5be0cd19u};
    buffer_len_ = 0;
    total_len_ = 0;
  }

  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    total_len_ += len;
    while (len > 0) {
      const std::size_t take = std::min(len, std::size_t(64) - buffer_len_);
      std::memcpy(buffer_ + buffer_len_, p, take);
      buffer_len_ += take;
      p += take;
      len -= take;
      if (buffer_len_ == 64) {
        process(buffer_);
        buffer_len_ = 0;
      }
    }
  }

  std::string hex_digest() {
    std::uint8_t final_block[128];
    std::size_t final_len = buffer_len_;
    std::memcpy(final_block, buffer_, buffer_len_);
    final_block[final_len++] = 0x80;
    std::size_t pad_to = (final_len <= 56) ? 56 : 120;
    while (final_len < pad_to) final_block[final_len++] = 0;
    const std::uint64_t bits = total_len_ * 8;
    for (int i = 7; i >= 0; --i) final_block[final_len++] = std::uint8_t(bits >> (8 * i));
    for (std::size_t off = 0; off < final_len; off += 64) process(final_block + off);

    static const char* kHex = "0123456789abcdef";
    std::string out(64, '0');
    for (int i = 0; i < 8; ++i) {
      for (int b = 0; b < 4; ++b) {
        const std::uint8_t byte = std::uint8_t(h_[i] >> (8 * (3 - b)));
        out[i * 8 + b * 2] = kHex[byte >> 4];
        out[i * 8 + b * 2 + 1] = kHex[byte & 0xf];
      }
    }
    reset();
    return out;
  }

 private:
  static std::uint32_t rotr(std::uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

  void process(const std::uint8_t* block) {
    static constexpr std::uint32_t K[64] = {
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
        0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
        0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
        0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
        0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
        0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
        0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
        0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
        0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
        0xc67178f2};
    std::uint32_t w[64];
    for (int i = 0; i < 16; ++i) {
      w[i] = (std::uint32_t(block[4 * i]) << 24) | (std::uint32_t(block[4 * i + 1]) << 16) |
             (std::uint32_t(block[4 * i + 2]) << 8) | std::uint32_t(block[4 * i + 3]);
    }
    for (int i = 16; i < 64; ++i) {
      const std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      const std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    auto [a, b, c, d, e, f, g, h] =
        std::tuple{h_[0], h_[1], h_[2], h_[3], h_[4], h_[5], h_[6], h_[7]};
    for (int i = 0; i < 64; ++i) {
      const std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      const std::uint32_t ch = (e & f) ^ (~e & g);
      const std::uint32_t t1 = h + s1 + ch + K[i] + w[i];
      const std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      const std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      const std::uint32_t t2 = s0 + maj;
      h = g; g = f; f = e; e = d + t1;
      d = c; c = b; b = a; a = t1 + t2;
    }
    h_[0] += a; h_[1] += b; h_[2] += c; h_[3] += d;
    h_[4] += e; h_[5] += f; h_[6] += g; h_[7] += h;
  }

  std::array<std::uint32_t, 8> h_{};
  std::uint8_t buffer_[64] = {};
  std::size_t buffer_len_ = 0;
  std::uint64_t total_len_ = 0;
};

inline std::string sha256_hex(std::string_view data) {
  Sha256 s;
  s.update(data.data(), data.size());
  return s.hex_digest();
}

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open file for hashing: " + path.string());
  Sha256 s;
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) s.update(buf, std::size_t(in.gcount()));
  return s.hex_digest();
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------
inline void write_file_atomic(const fs::path& path, std::string_view content) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), "cannot open for writing: " + tmp.string());
    out.write(content.data(), std::streamsize(content.size()));
    require(out.good(), "write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Little-endian 64-bit IEEE doubles, the on-disk layout for all binary arrays.
inline void write_doubles_le(const fs::path& path, std::span<const double> values) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot open for writing: " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              std::streamsize(values.size() * sizeof(double)));
  } else {
    for (double v : values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = char(bits >> (8 * i));
      out.write(bytes, 8);
    }
  }
  require(out.good(), "write failed: " + path.string());
}

inline std::vector<double> read_doubles_le(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  require(in.good(), "cannot open file: " + path.string());
  const std::streamsize bytes = in.tellg();
  require(bytes % 8 == 0, "binary array has truncated length: " + path.string());
  in.seekg(0);
  std::vector<double> values(std::size_t(bytes) / 8);
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(values.data()), bytes);
  } else {
    for (auto& v : values) {
      char b[8];
      in.read(b, 8);
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= std::uint64_t(std::uint8_t(b[i])) << (8 * i);
      std::memcpy(&v, &bits, 8);
    }
  }
  require(in.good(), "read failed: " + path.string());
  return values;
}

// Shortest round-trip decimal for doubles: deterministic and parse-exact.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string to_string() const {
    std::string out;
    for (std::size_t i = 0; i < header.size(); ++i) {
      out += header[i];
      out += (i + 1 < header.size()) ? "," : "\n";
    }
    for (const auto& row : rows) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        out += row[i];
        out += (i + 1 < row.size()) ? "," : "\n";
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Minimal SVG log-log plot: data points, optional fitted power law.
// ---------------------------------------------------------------------------
inline std::string svg_loglog_plot(std::span<const std::array<double, 2>> points,
                                   double fit_prefactor, double fit_exponent,
                                   const std::string& title, const std::string& x_label,
                                   const std::string& y_label) {
  require(!points.empty(), "svg plot: no points");
  double lx0 = 1e300, lx1 = -1e300, ly0 = 1e300, ly1 = -1e300;
  for (const auto& p : points) {
    require(p[0] > 0 && p[1] > 0, "svg plot: log-log needs positive data");
    lx0 = std::min(lx0, std::log10(p[0]));
    lx1 = std::max(lx1, std::log10(p[0]));
    ly0 = std::min(ly0, std::log10(p[1]));
    ly1 = std::max(ly1, std::log10(p[1]));
  }
  if (lx1 - lx0 < 1e-12) { lx0 -= 0.5; lx1 += 0.5; }
  if (ly1 - ly0 < 1e-12) { ly0 -= 0.5; ly1 += 0.5; }
  const double margin_x = 0.05 * (lx1 - lx0), margin_y = 0.1 * (ly1 - ly0);
  lx0 -= margin_x; lx1 += margin_x; ly0 -= margin_y; ly1 += margin_y;
  const int W = 640, H = 480, L = 70, B = 50, T = 40, R = 20;
  const auto px = [&](double x) { return L + (std::log10(x) - lx0) / (lx1 - lx0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (std::log10(y) - ly0) / (ly1 - ly0) * (H - T - B); };

  std::ostringstream s;
  s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  s << "<rect width='100%' height='100%' fill='white'/>\n";
  s << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='15'>" << title
    << "</text>\n";
  s << "<rect x='" << L << "' y='" << T << "' width='" << (W - L - R) << "' height='"
    << (H - T - B) << "' fill='none' stroke='black'/>\n";
  // decade ticks
  for (int e = int(std::ceil(lx0)); e <= int(std::floor(lx1)); ++e) {
    const double x = std::pow(10.0, e);
    s << "<line x1='" << px(x) << "' y1='" << (H - B) << "' x2='" << px(x) << "' y2='"
      << (H - B + 5) << "' stroke='black'/>\n";
    s << "<text x='" << px(x) << "' y='" << (H - B + 18) << "' text-anchor='middle' font-size='11'>1e"
      << e << "</text>\n";
  }
  for (int e = int(std::ceil(ly0)); e <= int(std::floor(ly1)); ++e) {
    const double y = std::pow(10.0, e);
    s << "<line x1='" << (L - 5) << "' y1='" << py(y) << "' x2='" << L << "' y2='" << py(y)
      << "' stroke='black'/>\n";
    s << "<text x='" << (L - 8) << "' y='" << (py(y) + 4) << "' text-anchor='end' font-size='11'>1e"
      << e << "</text>\n";
  }
  s << "<text x='" << W / 2 << "' y='" << (H - 12) << "' text-anchor='middle' font-size='13'>"
    << x_label << "</text>\n";
  s << "<text x='18' y='" << H / 2 << "' text-anchor='middle' font-size='13' transform='rotate(-90 18 "
    << H / 2 << ")'>" << y_label << "</text>\n";
  // fitted line
  if (fit_prefactor > 0.0) {
    const double xa = std::pow(10.0, lx0 + margin_x), xb = std::pow(10.0, lx1 - margin_x);
    const double ya = fit_prefactor * std::pow(xa, fit_exponent);
    const double yb = fit_prefactor * std::pow(xb, fit_exponent);
    if (ya > 0 && yb > 0)
      s << "<line x1='" << px(xa) << "' y1='" << py(ya) << "' x2='" << px(xb) << "' y2='" << py(yb)
        << "' stroke='firebrick' stroke-dasharray='6,4'/>\n";
  }
  // polyline through points + markers
  s << "<polyline fill='none' stroke='steelblue' points='";
  for (const auto& p : points) s << px(p[0]) << "," << py(p[1]) << " ";
  s << "'/>\n";
  for (const auto& p : points)
    s << "<circle cx='" << px(p[0]) << "' cy='" << py(p[1]) << "' r='4' fill='steelblue'/>\n";
  s << "</svg>\n";
  return s.str();
}

// ---------------------------------------------------------------------------
// Threads
// ---------------------------------------------------------------------------
inline int resolve_threads(int requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("MEANFIELD_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? int(hc) : 1;
}

// Runs fn(i) for i in [0, count) on `threads` workers. Work items must write
// only to their own slots; any exception is rethrown after joining.
template <typename Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  threads = std::min<std::size_t>(std::max(threads, 1), std::max<std::size_t>(count, 1));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::string error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count || failed.load()) return;
        try {
          fn(i);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(error_mutex);
          error = e.what();
          failed.store(true);
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failed.load()) throw Error("parallel_for worker failed: " + error);
}

}  // namespace mfl::io
