#pragma once

#include <string>
#include <vector>

#include "kinesim/kinematics.hpp"

namespace kinesim {

/// One tokenized track: which scenario file and agent it came from, the
/// timestep, the logged initial state and the flat token indices.
struct TokenRecord {
  std::string scenario;  // scenario file name (no directory)
  int agent_id = 0;
  double dt = 0.5;
  AgentState init;
  std::vector<int> tokens;
  std::vector<bool> valid;  // per-token supervision mask (empty = all valid)
};

std::string serialize_token_records(const std::vector<TokenRecord>& records);
void save_token_records(const std::vector<TokenRecord>& records, const std::string& path);
std::vector<TokenRecord> load_token_records(const std::string& path);

}  // namespace kinesim
