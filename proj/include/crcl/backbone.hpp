#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "crcl/numerics.hpp"

namespace crcl {

struct BackboneConfig {
  int input_dim = 0;    // D
  int hidden_dim = 128; // k, width of the residual blocks
  int embed_dim = 32;   // d
  int num_blocks = 2;
  std::uint64_t seed = 0;
};

// Bottleneck adapter running in parallel to a block's MLP.
// w_up starts at zero so a fresh adapter leaves the backbone unchanged.
struct Adapter {
  Mat w_down;  // k x k_hat
  Mat w_up;    // k_hat x k
};

struct AdapterSet {
  std::vector<Adapter> blocks;
  // Bumped on every training mutation; traces record it so a backward pass
  // against stale caches is rejected.
  std::uint64_t version = 0;

  bool same_shape(const AdapterSet& other) const;
  void set_zero();
};

struct ForwardTrace {
  struct BlockCache {
    Mat input;        // x_l
    Mat mlp_pre;      // x_l * A + a
    Mat adapter_pre;  // x_l * W_down
  };
  std::vector<BlockCache> blocks;
  std::uint64_t adapter_version = 0;
  Eigen::Index batch_rows = 0;
};

/// Deterministic frozen feature extractor: input projection, residual
/// MLP blocks with parallel adapter insertion points, and a final linear
/// projection to the embedding dimension.
class FrozenBackbone {
 public:
  explicit FrozenBackbone(const BackboneConfig& cfg);

  static FrozenBackbone load(const std::string& path);
  void save(const std::string& path) const;

  const BackboneConfig& config() const { return cfg_; }

  /// x: batch rows x D. Returns batch rows x d embeddings.
  Mat embed(const Mat& x, const AdapterSet& adapters,
            ForwardTrace* trace = nullptr) const;

  /// Output of one residual block with its adapter:
  /// x + MLP(x) + ReLU(x W_down) W_up.
  Mat block_forward(int block_index, const Mat& x, const Adapter& adapter) const;

  /// Exact gradients of a scalar loss w.r.t. every adapter parameter, given
  /// the gradient of the loss w.r.t. the embedding batch. Frozen weights have
  /// no gradient slots.
  AdapterSet backward_adapters(const ForwardTrace& trace,
                               const AdapterSet& adapters,
                               const Mat& grad_embedding) const;

  /// FNV-1a over the frozen weight bytes; constant across any training run.
  std::uint64_t checksum() const;

 private:
  struct Block {
    Mat a;       // k x k
    Vec a_bias;  // k
    Mat b;       // k x k
    Vec b_bias;  // k
  };

  FrozenBackbone() = default;

  BackboneConfig cfg_;
  Mat w_in_;   // D x k
  Vec b_in_;   // k
  std::vector<Block> blocks_;
  Mat w_out_;  // k x d
  Vec b_out_;  // d
};

/// Fresh adapters for every block: W_down ~ N(0, 0.02^2), W_up = 0.
AdapterSet make_adapters(const BackboneConfig& cfg, int bottleneck_dim,
                         std::mt19937_64& rng);

// Embedding bypass file ("CRCLEM1"): rows = samples, cols = d.
void write_embedding_file(const std::string& path, const Mat& embeddings);
Mat read_embedding_file(const std::string& path);

}  // namespace crcl
