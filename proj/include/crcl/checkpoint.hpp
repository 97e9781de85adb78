#pragma once

#include <string>
#include <vector>

#include "crcl/analytic.hpp"
#include "crcl/learners.hpp"

namespace crcl {

// Per-session training snapshot ("CRCLCK1"): everything needed to continue
// the incremental run from the next session boundary.
struct Checkpoint {
  int session = 0;
  int classes_seen = 0;
  LearnerState conservative;
  bool has_radical = false;
  LearnerState radical;
  SuffStats stats_conservative;
  SuffStats stats_radical;
  double beta = 1.0;
  bool beta_fallback = false;
  std::string rng_state;  // textual mt19937_64 state
  std::vector<double> session_accuracy;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace crcl
