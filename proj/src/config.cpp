#include "lqseg/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>

#include "lqseg/errors.hpp"

namespace lqseg {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

// one setter per key; value arrives as trimmed text
using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

long long parse_int(const std::string& v, const std::string& where) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ParseError("config: expected integer for " + where + ", got '" + v + "'");
  return out;
}

double parse_real(const std::string& v, const std::string& where) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ParseError("config: expected number for " + where + ", got '" + v + "'");
  }
}

bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ParseError("config: expected true/false for " + where + ", got '" + v + "'");
}

std::string parse_string(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"')
    return v.substr(1, v.size() - 2);
  return v;
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"model.d", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.d = static_cast<int>(parse_int(v, w));
       }},
      {"model.n_q", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.n_q = static_cast<int>(parse_int(v, w));
       }},
      {"model.stages", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.stages = static_cast<int>(parse_int(v, w));
       }},
      {"data.path", [](RunConfig& c, const std::string& v, const std::string&) {
         c.train.dataset_path = parse_string(v);
       }},
      {"data.image_size", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.image_size = static_cast<int>(parse_int(v, w));
       }},
      {"train.iterations", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.iterations = static_cast<int>(parse_int(v, w));
       }},
      {"train.batch_size", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.batch_size = static_cast<int>(parse_int(v, w));
       }},
      {"train.base_lr", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.base_lr = parse_real(v, w);
       }},
      {"train.warmup_iters", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.warmup_iters = static_cast<int>(parse_int(v, w));
       }},
      {"train.checkpoint_every", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.checkpoint_every = static_cast<int>(parse_int(v, w));
       }},
      {"train.seed", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.seed = static_cast<std::uint64_t>(parse_int(v, w));
       }},
      {"train.weight_decay", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.weight_decay = parse_real(v, w);
       }},
      {"train.clip_norm", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.clip_norm = parse_real(v, w);
       }},
      {"train.lambda_cls", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.lambda_cls = parse_real(v, w);
       }},
      {"train.lambda_mask", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.lambda_mask = parse_real(v, w);
       }},
      {"train.lambda_attr", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.train.lambda_attr = parse_real(v, w);
       }},
      {"train.out_dir", [](RunConfig& c, const std::string& v, const std::string&) {
         c.train.out_dir = parse_string(v);
       }},
      {"eval.f1_threshold", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.eval_f1_threshold = parse_real(v, w);
       }},
      {"infer.auto_pad", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.infer_auto_pad = parse_bool(v, w);
       }},
  };
  return table;
}

void apply_pair(RunConfig& cfg, const std::string& key, const std::string& value,
                const std::string& where) {
  const auto it = setters().find(key);
  if (it == setters().end())
    throw ParseError("config: unknown key '" + key + "' in " + where);
  it->second(cfg, value, where + ":" + key);
}

}  // namespace

std::vector<std::string> known_config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, v] : setters()) keys.push_back(k);
  return keys;
}

RunConfig parse_config(const std::string& content, const std::string& source) {
  RunConfig cfg;
  std::size_t line_no = 0, pos = 0;
  while (pos <= content.size()) {
    const std::size_t eol = content.find('\n', pos);
    std::string line = content.substr(pos, eol == std::string::npos ? std::string::npos
                                                                    : eol - pos);
    pos = eol == std::string::npos ? content.size() + 1 : eol + 1;
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("config: missing '=' at " + source + ":" + std::to_string(line_no));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ParseError("config: empty key or value at " + source + ":" +
                       std::to_string(line_no));
    apply_pair(cfg, key, value, source + ":" + std::to_string(line_no));
  }
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("config: cannot open " + path);
  std::string content((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
  return parse_config(content, path);
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
  for (const std::string& item : overrides) {
    const std::size_t eq = item.find('=');
    if (eq == std::string::npos)
      throw ParseError("config: override '" + item + "' is not key=value");
    apply_pair(cfg, trim(item.substr(0, eq)), trim(item.substr(eq + 1)), "--set");
  }
}

}  // namespace lqseg
