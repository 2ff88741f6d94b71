#include "rino/config.hpp"

#include "rino/error.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace rino {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw UsageError("config key '" + key + "': '" + v + "' is not a number");
  return out;
}

long to_long(const std::string& key, const std::string& v) {
  long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw UsageError("config key '" + key + "': '" + v + "' is not an integer");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw UsageError("config key '" + key + "': '" + v + "' is not a nonnegative integer");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw UsageError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::string str(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Member>
Field int_field(Member member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) {
            const long x = to_long(k, v);
            if (x < 1) throw UsageError("config key '" + k + "' must be positive");
            member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(x);
          },
          [member](const RunConfig& c) { return std::to_string(member(c)); }};
}

template <typename Member>
Field double_field(Member member, bool positive) {
  return {[member, positive](RunConfig& c, const std::string& k, const std::string& v) {
            const double x = to_double(k, v);
            if (positive ? !(x > 0.0) : !(x >= 0.0)) {
              throw UsageError("config key '" + k + (positive ? "' must be positive" : "' must be nonnegative"));
            }
            member(c) = x;
          },
          [member](const RunConfig& c) { return str(member(c)); }};
}

template <typename Member>
Field bool_field(Member member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = to_bool(k, v); },
          [member](const RunConfig& c) { return std::string(member(c) ? "true" : "false"); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> f = {
      {"k", int_field([](auto& c) -> auto& { return c.pipeline.k; })},
      {"k_q", int_field([](auto& c) -> auto& { return c.pipeline.k_q; })},
      {"channels", int_field([](auto& c) -> auto& { return c.train.network.channels; })},
      {"out_dim", int_field([](auto& c) -> auto& { return c.train.network.out_dim; })},
      {"blocks", int_field([](auto& c) -> auto& { return c.train.network.blocks; })},
      {"mlp_hidden", int_field([](auto& c) -> auto& { return c.train.network.mlp_hidden; })},
      {"knn", int_field([](auto& c) -> auto& { return c.train.network.knn; })},
      {"tau", double_field([](auto& c) -> auto& { return c.train.objective.tau; }, true)},
      {"gamma", double_field([](auto& c) -> auto& { return c.train.objective.gamma; }, false)},
      {"gamma_q", double_field([](auto& c) -> auto& { return c.train.objective.gamma_q; }, false)},
      {"lambda1", double_field([](auto& c) -> auto& { return c.train.objective.weights.orth_c; }, false)},
      {"lambda2", double_field([](auto& c) -> auto& { return c.train.objective.weights.orth_q; }, false)},
      {"lambda3", double_field([](auto& c) -> auto& { return c.train.objective.weights.bij; }, false)},
      {"lambda4", double_field([](auto& c) -> auto& { return c.train.objective.weights.couple_c; }, false)},
      {"lambda5", double_field([](auto& c) -> auto& { return c.train.objective.weights.couple_q; }, false)},
      {"lambda6", double_field([](auto& c) -> auto& { return c.train.objective.weights.contr; }, false)},
      {"use_struct", bool_field([](auto& c) -> auto& { return c.train.objective.toggles.structural; })},
      {"use_couple", bool_field([](auto& c) -> auto& { return c.train.objective.toggles.coupling; })},
      {"use_contr", bool_field([](auto& c) -> auto& { return c.train.objective.toggles.contrastive; })},
      {"use_qbranch", bool_field([](auto& c) -> auto& { return c.train.objective.toggles.q_branch; })},
      {"use_pq", bool_field([](auto& c) -> auto& { return c.train.objective.toggles.pi_q; })},
      {"use_cq_coupling", bool_field([](auto& c) -> auto& { return c.train.objective.toggles.cq_coupling; })},
      {"lr", double_field([](auto& c) -> auto& { return c.train.lr; }, true)},
      {"beta1", double_field([](auto& c) -> auto& { return c.train.beta1; }, false)},
      {"beta2", double_field([](auto& c) -> auto& { return c.train.beta2; }, false)},
      {"eps", double_field([](auto& c) -> auto& { return c.train.eps; }, true)},
      {"grad_clip", double_field([](auto& c) -> auto& { return c.train.grad_clip; }, false)},
      {"iters",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          const long x = to_long(k, v);
          if (x < 0) throw UsageError("config key 'iters' must be nonnegative");
          c.train.iterations = x;
        },
        [](const RunConfig& c) { return std::to_string(c.train.iterations); }}},
      {"checkpoint_every",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          const long x = to_long(k, v);
          if (x < 0) throw UsageError("config key 'checkpoint_every' must be nonnegative");
          c.train.checkpoint_every = x;
        },
        [](const RunConfig& c) { return std::to_string(c.train.checkpoint_every); }}},
      {"seed",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.seed = to_u64(k, v); },
        [](const RunConfig& c) { return std::to_string(c.train.seed); }}},
      {"cache_dir",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.cache_dir = v; },
        [](const RunConfig& c) { return c.cache_dir; }}},
  };
  return f;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& [name, f] : fields()) {
    if (name == key) {
      f.set(config, key, value);
      return;
    }
  }
  throw UsageError("unknown config key '" + key + "'");
}

RunConfig parse_config(std::string_view text, RunConfig base) {
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(number) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    try {
      set_config_value(base, key, value);
    } catch (const UsageError& e) {
      throw UsageError("config line " + std::to_string(number) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), std::move(base));
  } catch (const UsageError& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

std::string format_config(const RunConfig& config) {
  std::ostringstream os;
  for (const auto& [name, f] : fields()) os << name << " = " << f.get(config) << '\n';
  return os.str();
}

}  // namespace rino
