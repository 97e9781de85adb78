#include "crcl/backbone.hpp"

#include <cstring>
#include <fstream>

#include "crcl/errors.hpp"

namespace crcl {

namespace {

constexpr char kBackboneMagic[8] = {'C', 'R', 'C', 'L', 'B', 'K', '1', '\0'};
constexpr char kEmbeddingMagic[8] = {'C', 'R', 'C', 'L', 'E', 'M', '1', '\0'};

Mat random_matrix(Eigen::Index rows, Eigen::Index cols, double stddev,
                  std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = dist(rng);
    }
  }
  return m;
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

// Row-major on disk regardless of Eigen's in-memory layout.
void write_matrix(std::ostream& os, const Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      os.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
  }
}

Mat read_matrix(std::istream& is, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      double v = 0;
      is.read(reinterpret_cast<char*>(&v), sizeof v);
      m(r, c) = v;
    }
  }
  return m;
}

void fnv1a(std::uint64_t& h, const Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      double v = m(r, c);
      unsigned char bytes[sizeof v];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  }
}

}  // namespace

bool AdapterSet::same_shape(const AdapterSet& other) const {
  if (blocks.size() != other.blocks.size()) return false;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].w_down.rows() != other.blocks[i].w_down.rows() ||
        blocks[i].w_down.cols() != other.blocks[i].w_down.cols() ||
        blocks[i].w_up.rows() != other.blocks[i].w_up.rows() ||
        blocks[i].w_up.cols() != other.blocks[i].w_up.cols()) {
      return false;
    }
  }
  return true;
}

void AdapterSet::set_zero() {
  for (auto& a : blocks) {
    a.w_down.setZero();
    a.w_up.setZero();
  }
  ++version;
}

FrozenBackbone::FrozenBackbone(const BackboneConfig& cfg) : cfg_(cfg) {
  if (cfg.input_dim < 1 || cfg.hidden_dim < 1 || cfg.embed_dim < 1 ||
      cfg.num_blocks < 1) {
    throw InvalidParameterError("FrozenBackbone: all dims must be >= 1");
  }
  std::mt19937_64 rng(cfg.seed);
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(cfg.input_dim));
  const double hid_scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  w_in_ = random_matrix(cfg.input_dim, cfg.hidden_dim, in_scale, rng);
  b_in_ = Vec::Zero(cfg.hidden_dim);
  blocks_.resize(cfg.num_blocks);
  for (auto& blk : blocks_) {
    blk.a = random_matrix(cfg.hidden_dim, cfg.hidden_dim, hid_scale, rng);
    blk.a_bias = Vec::Zero(cfg.hidden_dim);
    blk.b = random_matrix(cfg.hidden_dim, cfg.hidden_dim, hid_scale, rng);
    blk.b_bias = Vec::Zero(cfg.hidden_dim);
  }
  w_out_ = random_matrix(cfg.hidden_dim, cfg.embed_dim, hid_scale, rng);
  b_out_ = Vec::Zero(cfg.embed_dim);
}

Mat FrozenBackbone::block_forward(int block_index, const Mat& x,
                                  const Adapter& adapter) const {
  if (block_index < 0 || block_index >= static_cast<int>(blocks_.size())) {
    throw InvalidParameterError("block_forward: bad block index");
  }
  if (x.cols() != cfg_.hidden_dim) {
    throw ShapeError("block_forward: input width " + std::to_string(x.cols()) +
                     " != hidden dim " + std::to_string(cfg_.hidden_dim));
  }
  if (adapter.w_down.rows() != cfg_.hidden_dim ||
      adapter.w_up.cols() != cfg_.hidden_dim ||
      adapter.w_down.cols() != adapter.w_up.rows()) {
    throw ShapeError("block_forward: adapter shape mismatch");
  }
  const Block& blk = blocks_[block_index];
  Mat relu = ((x * blk.a).rowwise() + blk.a_bias.transpose()).cwiseMax(0.0);
  Mat mlp = (relu * blk.b).rowwise() + blk.b_bias.transpose();
  Mat adapter_out = (x * adapter.w_down).cwiseMax(0.0) * adapter.w_up;
  return x + mlp + adapter_out;
}

Mat FrozenBackbone::embed(const Mat& x, const AdapterSet& adapters,
                          ForwardTrace* trace) const {
  if (x.cols() != cfg_.input_dim) {
    throw ShapeError("embed: input width " + std::to_string(x.cols()) +
                     " != input dim " + std::to_string(cfg_.input_dim));
  }
  if (static_cast<int>(adapters.blocks.size()) != cfg_.num_blocks) {
    throw ShapeError("embed: adapter count " +
                     std::to_string(adapters.blocks.size()) + " != block count " +
                     std::to_string(cfg_.num_blocks));
  }
  if (trace) {
    trace->blocks.clear();
    trace->blocks.resize(blocks_.size());
    trace->adapter_version = adapters.version;
    trace->batch_rows = x.rows();
  }
  Mat h = (x * w_in_).rowwise() + b_in_.transpose();
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& blk = blocks_[l];
    const Adapter& ad = adapters.blocks[l];
    Mat mlp_pre = (h * blk.a).rowwise() + blk.a_bias.transpose();
    Mat adapter_pre = h * ad.w_down;
    Mat mlp = (mlp_pre.cwiseMax(0.0) * blk.b).rowwise() + blk.b_bias.transpose();
    Mat adapter_out = adapter_pre.cwiseMax(0.0) * ad.w_up;
    Mat next = h + mlp + adapter_out;
    if (trace) {
      trace->blocks[l].input = std::move(h);
      trace->blocks[l].mlp_pre = std::move(mlp_pre);
      trace->blocks[l].adapter_pre = std::move(adapter_pre);
    }
    h = std::move(next);
  }
  return (h * w_out_).rowwise() + b_out_.transpose();
}

AdapterSet FrozenBackbone::backward_adapters(const ForwardTrace& trace,
                                             const AdapterSet& adapters,
                                             const Mat& grad_embedding) const {
  if (trace.adapter_version != adapters.version ||
      static_cast<int>(trace.blocks.size()) != cfg_.num_blocks) {
    throw TraceError("backward_adapters: trace does not match adapter state");
  }
  if (grad_embedding.rows() != trace.batch_rows ||
      grad_embedding.cols() != cfg_.embed_dim) {
    throw TraceError("backward_adapters: gradient shape does not match trace");
  }
  AdapterSet grads;
  grads.blocks.resize(adapters.blocks.size());
  Mat dh = grad_embedding * w_out_.transpose();
  for (int l = cfg_.num_blocks - 1; l >= 0; --l) {
    const Block& blk = blocks_[l];
    const Adapter& ad = adapters.blocks[l];
    const auto& cache = trace.blocks[l];

    // Adapter path.
    Mat q = cache.adapter_pre.cwiseMax(0.0);  // ReLU(x W_down)
    grads.blocks[l].w_up = q.transpose() * dh;
    Mat dq = dh * ad.w_up.transpose();
    Mat dp = (cache.adapter_pre.array() > 0.0).select(dq, 0.0);
    grads.blocks[l].w_down = cache.input.transpose() * dp;

    // Frozen MLP path (no gradient slots, but it carries dh backwards).
    Mat dr = dh * blk.b.transpose();
    Mat du = (cache.mlp_pre.array() > 0.0).select(dr, 0.0);
    dh = dh + du * blk.a.transpose() + dp * ad.w_down.transpose();
  }
  return grads;
}

std::uint64_t FrozenBackbone::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  fnv1a(h, w_in_);
  fnv1a(h, b_in_);
  for (const auto& blk : blocks_) {
    fnv1a(h, blk.a);
    fnv1a(h, blk.a_bias);
    fnv1a(h, blk.b);
    fnv1a(h, blk.b_bias);
  }
  fnv1a(h, w_out_);
  fnv1a(h, b_out_);
  return h;
}

void FrozenBackbone::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kBackboneMagic, sizeof kBackboneMagic);
  write_u64(os, static_cast<std::uint64_t>(cfg_.input_dim));
  write_u64(os, static_cast<std::uint64_t>(cfg_.hidden_dim));
  write_u64(os, static_cast<std::uint64_t>(cfg_.embed_dim));
  write_u64(os, static_cast<std::uint64_t>(cfg_.num_blocks));
  write_u64(os, cfg_.seed);
  write_matrix(os, w_in_);
  write_matrix(os, b_in_);
  for (const auto& blk : blocks_) {
    write_matrix(os, blk.a);
    write_matrix(os, blk.a_bias);
    write_matrix(os, blk.b);
    write_matrix(os, blk.b_bias);
  }
  write_matrix(os, w_out_);
  write_matrix(os, b_out_);
  if (!os) throw IoError("write failed: " + path);
}

FrozenBackbone FrozenBackbone::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[8] = {};
  is.read(magic, sizeof magic);
  if (std::memcmp(magic, kBackboneMagic, sizeof magic) != 0) {
    throw ParseError(path + ": bad magic, expected CRCLBK1");
  }
  FrozenBackbone bb;
  bb.cfg_.input_dim = static_cast<int>(read_u64(is));
  bb.cfg_.hidden_dim = static_cast<int>(read_u64(is));
  bb.cfg_.embed_dim = static_cast<int>(read_u64(is));
  bb.cfg_.num_blocks = static_cast<int>(read_u64(is));
  bb.cfg_.seed = read_u64(is);
  const int k = bb.cfg_.hidden_dim;
  bb.w_in_ = read_matrix(is, bb.cfg_.input_dim, k);
  bb.b_in_ = read_matrix(is, k, 1);
  bb.blocks_.resize(bb.cfg_.num_blocks);
  for (auto& blk : bb.blocks_) {
    blk.a = read_matrix(is, k, k);
    blk.a_bias = read_matrix(is, k, 1);
    blk.b = read_matrix(is, k, k);
    blk.b_bias = read_matrix(is, k, 1);
  }
  bb.w_out_ = read_matrix(is, k, bb.cfg_.embed_dim);
  bb.b_out_ = read_matrix(is, bb.cfg_.embed_dim, 1);
  if (!is) throw ParseError(path + ": truncated backbone file");
  return bb;
}

AdapterSet make_adapters(const BackboneConfig& cfg, int bottleneck_dim,
                         std::mt19937_64& rng) {
  if (bottleneck_dim < 1 || bottleneck_dim >= cfg.hidden_dim) {
    throw InvalidParameterError(
        "make_adapters: bottleneck dim must satisfy 1 <= k_hat < k");
  }
  AdapterSet set;
  set.blocks.resize(cfg.num_blocks);
  for (auto& ad : set.blocks) {
    ad.w_down = random_matrix(cfg.hidden_dim, bottleneck_dim, 0.02, rng);
    ad.w_up = Mat::Zero(bottleneck_dim, cfg.hidden_dim);
  }
  return set;
}

void write_embedding_file(const std::string& path, const Mat& embeddings) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kEmbeddingMagic, sizeof kEmbeddingMagic);
  write_u64(os, static_cast<std::uint64_t>(embeddings.rows()));
  write_u64(os, static_cast<std::uint64_t>(embeddings.cols()));
  write_matrix(os, embeddings);
  if (!os) throw IoError("write failed: " + path);
}

Mat read_embedding_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[8] = {};
  is.read(magic, sizeof magic);
  if (std::memcmp(magic, kEmbeddingMagic, sizeof magic) != 0) {
    throw ParseError(path + ": bad magic, expected CRCLEM1");
  }
  const auto rows = static_cast<Eigen::Index>(read_u64(is));
  const auto cols = static_cast<Eigen::Index>(read_u64(is));
  Mat m = read_matrix(is, rows, cols);
  if (!is) throw ParseError(path + ": truncated embedding file");
  return m;
}

}  // namespace crcl
