#include "crcl/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "crcl/errors.hpp"

namespace crcl {

namespace {

constexpr char kMagic[8] = {'C', 'R', 'C', 'L', 'C', 'K', '1', '\0'};

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

void write_matrix(std::ostream& os, const Mat& m) {
  write_u64(os, static_cast<std::uint64_t>(m.rows()));
  write_u64(os, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      write_f64(os, m(r, c));
    }
  }
}

Mat read_matrix(std::istream& is) {
  const auto rows = static_cast<Eigen::Index>(read_u64(is));
  const auto cols = static_cast<Eigen::Index>(read_u64(is));
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = read_f64(is);
    }
  }
  return m;
}

void write_adapters(std::ostream& os, const AdapterSet& set) {
  write_u64(os, set.blocks.size());
  for (const auto& a : set.blocks) {
    write_matrix(os, a.w_down);
    write_matrix(os, a.w_up);
  }
}

AdapterSet read_adapters(std::istream& is) {
  AdapterSet set;
  set.blocks.resize(read_u64(is));
  for (auto& a : set.blocks) {
    a.w_down = read_matrix(is);
    a.w_up = read_matrix(is);
  }
  return set;
}

void write_stats(std::ostream& os, const SuffStats& s) {
  write_matrix(os, s.gram);
  write_matrix(os, s.cross);
  write_u64(os, static_cast<std::uint64_t>(s.num_samples));
}

SuffStats read_stats(std::istream& is) {
  SuffStats s;
  s.gram = read_matrix(is);
  s.cross = read_matrix(is);
  s.num_samples = static_cast<long>(read_u64(is));
  return s;
}

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  std::string s(read_u64(is), '\0');
  is.read(s.data(), static_cast<std::streamsize>(s.size()));
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kMagic, sizeof kMagic);
  write_u64(os, static_cast<std::uint64_t>(ck.session));
  write_u64(os, static_cast<std::uint64_t>(ck.classes_seen));
  write_adapters(os, ck.conservative.adapters);
  write_matrix(os, ck.conservative.classifier);
  write_u64(os, ck.has_radical ? 1 : 0);
  if (ck.has_radical) {
    write_adapters(os, ck.radical.adapters);
    write_matrix(os, ck.radical.classifier);
  }
  write_stats(os, ck.stats_conservative);
  write_stats(os, ck.stats_radical);
  write_f64(os, ck.beta);
  write_u64(os, ck.beta_fallback ? 1 : 0);
  write_string(os, ck.rng_state);
  write_u64(os, ck.session_accuracy.size());
  for (double a : ck.session_accuracy) write_f64(os, a);
  if (!os) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[8] = {};
  is.read(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw ParseError(path + ": bad magic, expected CRCLCK1");
  }
  Checkpoint ck;
  ck.session = static_cast<int>(read_u64(is));
  ck.classes_seen = static_cast<int>(read_u64(is));
  ck.conservative.adapters = read_adapters(is);
  ck.conservative.classifier = read_matrix(is);
  ck.conservative.role = Role::conservative;
  ck.has_radical = read_u64(is) != 0;
  if (ck.has_radical) {
    ck.radical.adapters = read_adapters(is);
    ck.radical.classifier = read_matrix(is);
    ck.radical.role = Role::radical;
  }
  ck.stats_conservative = read_stats(is);
  ck.stats_radical = read_stats(is);
  ck.beta = read_f64(is);
  ck.beta_fallback = read_u64(is) != 0;
  ck.rng_state = read_string(is);
  ck.session_accuracy.resize(read_u64(is));
  for (double& a : ck.session_accuracy) a = read_f64(is);
  if (!is) throw ParseError(path + ": truncated checkpoint");
  return ck;
}

}  // namespace crcl
