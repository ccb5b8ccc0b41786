#pragma once

#include <map>
#include <string>
#include <vector>

#include "lqseg/trainer.hpp"

namespace lqseg {

// Flat dotted-key configuration: `key = value` lines, '#' comments, string /
// number / bool values. Unknown keys are rejected.
struct RunConfig {
  TrainConfig train;
  double eval_f1_threshold = -1.0;  // <0: sweep the shared threshold
  bool infer_auto_pad = false;
};

// Parses file content; `source` names the file for error messages.
RunConfig parse_config(const std::string& content, const std::string& source);
RunConfig load_config_file(const std::string& path);

// Applies `key=value` override strings on top of a parsed config.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides);

// All keys the parser accepts.
std::vector<std::string> known_config_keys();

}  // namespace lqseg
