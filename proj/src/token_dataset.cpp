#include "kinesim/token_dataset.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "kinesim/action_codec.hpp"
#include "kinesim/scene_io.hpp"

namespace kinesim {

std::string serialize_token_records(const std::vector<TokenRecord>& records) {
  std::ostringstream out;
  for (const TokenRecord& r : records) {
    out << "track scene=" << r.scenario << " agent=" << r.agent_id
        << " dt=" << format_double(r.dt) << " init=" << format_double(r.init.x) << ','
        << format_double(r.init.y) << ',' << format_double(r.init.theta) << ','
        << format_double(r.init.v) << " tokens=";
    for (size_t i = 0; i < r.tokens.size(); ++i) {
      if (i != 0) out << ',';
      out << r.tokens[i];
    }
    if (!r.valid.empty()) {
      out << " valid=";
      for (bool b : r.valid) out << (b ? '1' : '0');
    }
    out << "\n";
  }
  return out.str();
}

void save_token_records(const std::vector<TokenRecord>& records, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_token_records: cannot open " + path);
  f << serialize_token_records(records);
  if (!f) throw std::runtime_error("save_token_records: write failed for " + path);
}

std::vector<TokenRecord> load_token_records(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_token_records: cannot open " + path);
  std::vector<TokenRecord> out;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag != "track") fail("expected 'track' record");
    TokenRecord r;
    std::string tok;
    bool have_tokens = false;
    while (ls >> tok) {
      const size_t eq = tok.find('=');
      if (eq == std::string::npos) fail("expected key=value, got '" + tok + "'");
      const std::string key = tok.substr(0, eq);
      const std::string value = tok.substr(eq + 1);
      try {
        if (key == "scene") {
          r.scenario = value;
        } else if (key == "agent") {
          r.agent_id = std::stoi(value);
        } else if (key == "dt") {
          r.dt = std::stod(value);
        } else if (key == "init") {
          std::istringstream vs(value);
          char sep;
          vs >> r.init.x >> sep >> r.init.y >> sep >> r.init.theta >> sep >> r.init.v;
          if (!vs) fail("bad init state '" + value + "'");
        } else if (key == "tokens") {
          std::istringstream vs(value);
          std::string item;
          while (std::getline(vs, item, ',')) {
            const int flat = std::stoi(item);
            if (flat < 0 || flat >= kVocabSize) fail("token index out of range: " + item);
            r.tokens.push_back(flat);
          }
          have_tokens = true;
        } else if (key == "valid") {
          for (char c : value) {
            if (c != '0' && c != '1') fail("valid mask must be 0/1");
            r.valid.push_back(c == '1');
          }
        } else {
          fail("unknown key '" + key + "'");
        }
      } catch (const std::invalid_argument&) {
        fail("bad value for key '" + key + "'");
      }
    }
    if (r.scenario.empty() || !have_tokens) fail("record missing scene or tokens");
    if (!r.valid.empty() && r.valid.size() != r.tokens.size()) {
      fail("valid mask length must match token count");
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace kinesim
