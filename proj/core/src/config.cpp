#include "gpw/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace gpw {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<std::size_t> to_uint_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : split(v, ',')) out.push_back(to_uint(key, item));
  return out;
}

std::pair<std::size_t, std::size_t> to_extent(const std::string& key, const std::string& v) {
  const auto parts = split(v, 'x');
  if (parts.size() == 1) {
    const auto s = to_uint(key, parts[0]);
    return {s, s};
  }
  if (parts.size() != 2) throw ConfigError("config key '" + key + "': expected HxW, got '" + v + "'");
  return {to_uint(key, parts[0]), to_uint(key, parts[1])};
}

std::string real_text(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

template <class T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f,
                 const char* sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += f(xs[i]);
  }
  return out;
}

template <class E, class F>
E wrap_parse(const std::string& key, const std::string& v, F&& parse) {
  try {
    return parse(v);
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

}  // namespace

std::string_view to_string(Fusion f) { return f == Fusion::sum ? "sum" : "learned"; }

Fusion parse_fusion(std::string_view text) {
  if (text == "sum") return Fusion::sum;
  if (text == "learned") return Fusion::learned;
  throw ConfigError("unknown fusion '" + std::string(text) + "'");
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  StageConfig s0;
  s0.grid_m = s0.grid_n = 4;
  s0.groups = 4;
  StageConfig s1;
  s1.grid_m = s1.grid_n = 2;
  s1.groups = 2;
  c.stages = {s0, s1};
  return c;
}

void ModelConfig::validate() const {
  if (image_height == 0 || image_width == 0) throw ConfigError("image_size must be positive");
  if (classes < 1 || classes >= static_cast<std::size_t>(objectives::kIgnoreLabel)) {
    throw ConfigError("classes must lie in [1,254]");
  }
  if (stages.empty()) throw ConfigError("at least one stage required");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    const std::string tag = "stage " + std::to_string(s) + ": ";
    if (st.grid_m == 0 || st.grid_n == 0) throw ConfigError(tag + "grid extents must be positive");
    if (st.groups == 0 || st.groups > st.grid_m * st.grid_n) {
      throw ConfigError(tag + std::to_string(st.groups) + " groups for a " +
                        std::to_string(st.grid_m) + "x" + std::to_string(st.grid_n) + " grid");
    }
    if (s > 0 && st.groups > stages[s - 1].groups) {
      throw ConfigError(tag + "group counts must be non-increasing across stages");
    }
    if (st.wformer.d_model != stages.front().wformer.d_model) {
      throw ConfigError(tag + "all stages must share the transformer width");
    }
    try {
      st.wformer.validate();
    } catch (const ContractError& e) {
      throw ConfigError(tag + e.what());
    }
  }
  if (overlap > 0) {
    for (const auto& st : stages) {
      if (st.grid_m == 1 && st.grid_n == 1) continue;
      if (2 * overlap >= std::min(image_height / st.grid_m, image_width / st.grid_n)) {
        throw ConfigError("overlap " + std::to_string(overlap) + " too large for the patch grid");
      }
    }
  }
  try {
    cnn.validate();
    congruence.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  if (cnn.num_classes != classes) throw ConfigError("cnn class count differs from classes");
  if (cnn.stages() < stages.size()) {
    throw ConfigError("context branch has " + std::to_string(cnn.stages()) +
                      " stages but guidance is needed for " + std::to_string(stages.size()));
  }
  const std::size_t div = std::size_t{1} << cnn.stages();
  if (cnn_input == 0 || cnn_input % div != 0) {
    throw ConfigError("cnn_input " + std::to_string(cnn_input) + " not divisible by " +
                      std::to_string(div));
  }
}

void TrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (total_iters == 0) throw ConfigError("total_iters must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be non-negative");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0,1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("adam_eps must be positive");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
}

RunConfig parse_config(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (!kv.emplace(key, value).second) {
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }

  RunConfig cfg;
  ModelConfig& m = cfg.model;
  TrainConfig& tr = cfg.train;
  wformer::WFormerConfig wf;
  std::vector<std::pair<std::size_t, std::size_t>> grids;
  for (const auto& st : m.stages) grids.emplace_back(st.grid_m, st.grid_n);
  std::vector<std::size_t> groups;
  for (const auto& st : m.stages) groups.push_back(st.groups);

  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter, std::less<>> setters = {
      {"image_size",
       [&](auto& k, auto& v) { std::tie(m.image_height, m.image_width) = to_extent(k, v); }},
      {"classes", [&](auto& k, auto& v) { m.classes = to_uint(k, v); }},
      {"t_channels", [&](auto& k, auto& v) { wf.d_model = to_uint(k, v); }},
      {"heads", [&](auto& k, auto& v) { wf.heads = to_uint(k, v); }},
      {"layers", [&](auto& k, auto& v) { wf.layers = to_uint(k, v); }},
      {"mlp_ratio", [&](auto& k, auto& v) { wf.mlp_ratio = to_uint(k, v); }},
      {"kv_downsample",
       [&](auto& k, auto& v) {
         wf.kv = wrap_parse<wformer::KvDownsample>(k, v, wformer::parse_kv_downsample);
       }},
      {"stage_grids",
       [&](auto& k, auto& v) {
         grids.clear();
         for (const auto& g : split(v, ',')) grids.push_back(to_extent(k, g));
       }},
      {"stage_groups", [&](auto& k, auto& v) { groups = to_uint_list(k, v); }},
      {"overlap", [&](auto& k, auto& v) { m.overlap = to_uint(k, v); }},
      {"grouping",
       [&](auto& k, auto& v) {
         m.grouping = wrap_parse<grouping::Strategy>(k, v, grouping::parse_strategy);
       }},
      {"share_heads", [&](auto& k, auto& v) { m.share_heads = to_bool(k, v); }},
      {"cnn_input", [&](auto& k, auto& v) { m.cnn_input = to_uint(k, v); }},
      {"cnn_channels", [&](auto& k, auto& v) { m.cnn.stage_channels = to_uint_list(k, v); }},
      {"aspp_rates", [&](auto& k, auto& v) { m.cnn.aspp_rates = to_uint_list(k, v); }},
      {"theta", [&](auto& k, auto& v) { m.congruence.theta = to_real(k, v); }},
      {"taylor_order", [&](auto& k, auto& v) { m.congruence.taylor_order = to_uint(k, v); }},
      {"relation",
       [&](auto& k, auto& v) {
         m.congruence.relation =
             wrap_parse<congruence::RelationKind>(k, v, congruence::parse_relation);
       }},
      {"fusion", [&](auto& k, auto& v) { m.fusion = wrap_parse<Fusion>(k, v, parse_fusion); }},
      {"aux_cnn_loss", [&](auto& k, auto& v) { m.aux_cnn_loss = to_bool(k, v); }},
      {"base_lr", [&](auto& k, auto& v) { tr.base_lr = to_real(k, v); }},
      {"total_iters", [&](auto& k, auto& v) { tr.total_iters = to_uint(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { tr.batch_size = to_uint(k, v); }},
      {"seed", [&](auto& k, auto& v) { tr.seed = to_uint(k, v); }},
      {"alpha", [&](auto& k, auto& v) { tr.alpha = to_real(k, v); }},
      {"gamma", [&](auto& k, auto& v) { tr.gamma = to_real(k, v); }},
      {"checkpoint_every", [&](auto& k, auto& v) { tr.checkpoint_every = to_uint(k, v); }},
      {"adam_beta1", [&](auto& k, auto& v) { tr.adam.beta1 = to_real(k, v); }},
      {"adam_beta2", [&](auto& k, auto& v) { tr.adam.beta2 = to_real(k, v); }},
      {"adam_eps", [&](auto& k, auto& v) { tr.adam.eps = to_real(k, v); }},
  };

  for (const auto& [key, value] : kv) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(key, value);
  }
  if (grids.size() != groups.size()) {
    throw ConfigError("stage_grids lists " + std::to_string(grids.size()) +
                      " stages but stage_groups lists " + std::to_string(groups.size()));
  }
  m.stages.clear();
  for (std::size_t s = 0; s < grids.size(); ++s) {
    m.stages.push_back(StageConfig{grids[s].first, grids[s].second, groups[s], wf});
  }
  m.cnn.num_classes = m.classes;
  m.congruence.alpha = tr.alpha;
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string model_text(const ModelConfig& m) {
  const auto& wf = m.stages.front().wformer;
  const std::function<std::string(const std::size_t&)> num = [](const std::size_t& x) {
    return std::to_string(x);
  };
  const std::function<std::string(const StageConfig&)> grid = [](const StageConfig& s) {
    return std::to_string(s.grid_m) + "x" + std::to_string(s.grid_n);
  };
  const std::function<std::string(const StageConfig&)> group = [](const StageConfig& s) {
    return std::to_string(s.groups);
  };
  std::ostringstream os;
  os << "image_size = " << m.image_height << "x" << m.image_width << '\n'
     << "classes = " << m.classes << '\n'
     << "t_channels = " << wf.d_model << '\n'
     << "heads = " << wf.heads << '\n'
     << "layers = " << wf.layers << '\n'
     << "mlp_ratio = " << wf.mlp_ratio << '\n'
     << "kv_downsample = " << wformer::to_string(wf.kv) << '\n'
     << "stage_grids = " << join(m.stages, grid) << '\n'
     << "stage_groups = " << join(m.stages, group) << '\n'
     << "overlap = " << m.overlap << '\n'
     << "grouping = " << grouping::to_string(m.grouping) << '\n'
     << "share_heads = " << (m.share_heads ? "true" : "false") << '\n'
     << "cnn_input = " << m.cnn_input << '\n'
     << "cnn_channels = " << join(m.cnn.stage_channels, num) << '\n'
     << "aspp_rates = " << join(m.cnn.aspp_rates, num) << '\n'
     << "theta = " << real_text(m.congruence.theta) << '\n'
     << "taylor_order = " << m.congruence.taylor_order << '\n'
     << "relation = " << congruence::to_string(m.congruence.relation) << '\n'
     << "fusion = " << to_string(m.fusion) << '\n'
     << "aux_cnn_loss = " << (m.aux_cnn_loss ? "true" : "false") << '\n';
  return os.str();
}

std::string to_text(const RunConfig& cfg) {
  const TrainConfig& t = cfg.train;
  std::ostringstream os;
  os << model_text(cfg.model)
     << "base_lr = " << real_text(t.base_lr) << '\n'
     << "total_iters = " << t.total_iters << '\n'
     << "batch_size = " << t.batch_size << '\n'
     << "seed = " << t.seed << '\n'
     << "alpha = " << real_text(t.alpha) << '\n'
     << "gamma = " << real_text(t.gamma) << '\n'
     << "checkpoint_every = " << t.checkpoint_every << '\n'
     << "adam_beta1 = " << real_text(t.adam.beta1) << '\n'
     << "adam_beta2 = " << real_text(t.adam.beta2) << '\n'
     << "adam_eps = " << real_text(t.adam.eps) << '\n';
  return os.str();
}

}  // namespace gpw
