#include "rino/config.hpp"
#include "rino/error.hpp"
#include "rino/eval.hpp"
#include "rino/maps.hpp"
#include "rino/pipeline.hpp"
#include "rino/selfcheck.hpp"
#include "rino/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using namespace rino;

namespace {

constexpr const char* kCacheEnv = "RINO_CACHE_DIR";

void note(const std::string& msg) { std::cerr << "rino: " << msg << '\n'; }

/// Config file plus per-key flag overrides, applied in that order.
struct ConfigSources {
  std::string file;
  std::vector<std::pair<std::string, std::string>> overrides;

  RunConfig resolve() const {
    RunConfig c = file.empty() ? RunConfig{} : load_config(file);
    if (const char* env = std::getenv(kCacheEnv); env && *env) c.cache_dir = env;
    for (const auto& [k, v] : overrides) set_config_value(c, k, v);
    return c;
  }
};

std::string flag_for(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

void add_config_flags(CLI::App* sub, ConfigSources& src) {
  sub->add_option("--config", src.file, "Key-value configuration file (flags override it)")->check(CLI::ExistingFile);
  for (const std::string& key : config_keys()) {
    if (key.rfind("use_", 0) == 0) continue;
    std::string names = flag_for(key);
    if (key == "k_q") names += ",--kq";
    sub->add_option_function<std::string>(
        names, [&src, key](const std::string& v) { src.overrides.emplace_back(key, v); },
        "Override config key '" + key + "'");
  }
  const std::vector<std::pair<std::string, std::string>> toggles = {
      {"--disable-struct", "use_struct"}, {"--disable-couple", "use_couple"}, {"--disable-contr", "use_contr"},
      {"--disable-qbranch", "use_qbranch"}, {"--disable-pq", "use_pq"}};
  for (const auto& [flag, key] : toggles) {
    sub->add_flag_callback(flag, [&src, key = key] { src.overrides.emplace_back(key, "false"); },
                           "Set " + key + " = false");
  }
  sub->add_flag_callback("--enable-cq-coupling", [&src] { src.overrides.emplace_back("use_cq_coupling", "true"); },
                         "Set use_cq_coupling = true");
}

ShapeData load_shape(const fs::path& path, const RunConfig& config) {
  const Mesh mesh = load_normalized_mesh(path);
  BundleSource src;
  ShapeData s = shape_for(mesh, config, &src);
  for (const auto& m : src.messages) note(path.filename().string() + ": " + m);
  return s;
}

NetworkParams resolve_params(const std::string& checkpoint, bool random_init, const RunConfig& config) {
  if (random_init && !checkpoint.empty()) throw UsageError("--checkpoint and --random-init are mutually exclusive");
  if (random_init) return init_params(config.train.seed, config.train.network);
  if (checkpoint.empty()) throw UsageError("a --checkpoint is required (or pass --random-init)");
  if (!fs::exists(checkpoint)) throw DataError("checkpoint '" + checkpoint + "' does not exist");
  return load_params(checkpoint);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("write to '" + path.string() + "' failed");
}

std::string matrix_csv(const Eigen::MatrixXd& m) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (long i = 0; i < m.rows(); ++i) {
    for (long j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m(i, j);
    os << '\n';
  }
  return os.str();
}

// Complex entries as consecutive (re, im) columns.
std::string complex_matrix_csv(const Eigen::MatrixXcd& m) {
  Eigen::MatrixXd interleaved(m.rows(), 2 * m.cols());
  for (long j = 0; j < m.cols(); ++j) {
    interleaved.col(2 * j) = m.col(j).real();
    interleaved.col(2 * j + 1) = m.col(j).imag();
  }
  return matrix_csv(interleaved);
}

// --- precompute ------------------------------------------------------------

int cmd_precompute(const std::vector<std::string>& meshes, const ConfigSources& src) {
  const RunConfig config = src.resolve();
  if (config.cache_dir.empty()) {
    throw UsageError(std::string("precompute needs a cache directory (--cache-dir or ") + kCacheEnv + ")");
  }
  for (const auto& path : meshes) {
    const Mesh mesh = load_normalized_mesh(path);
    BundleSource s;
    const ShapeBundle b = cached_bundle(mesh, config.pipeline.k, config.pipeline.k_q, config.cache_dir, &s);
    for (const auto& m : s.messages) note(fs::path(path).filename().string() + ": " + m);
    std::cout << path << ": " << (s.cache_hit ? "cached" : "built") << ", " << mesh.num_vertices() << " vertices, k "
              << b.basis.size() << ", k_q " << b.conn_basis.size() << '\n';
  }
  return 0;
}

// --- train -----------------------------------------------------------------

std::vector<std::pair<fs::path, fs::path>> read_pair_list(const fs::path& list) {
  std::ifstream in(list);
  if (!in) throw DataError("cannot read pair list '" + list.string() + "'");
  std::vector<std::pair<fs::path, fs::path>> out;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string a, b, extra;
    if (!(ls >> a)) continue;
    if (!(ls >> b) || (ls >> extra)) {
      throw DataError(list.string() + ":" + std::to_string(number) + ": expected two mesh paths");
    }
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : list.parent_path() / p; };
    out.emplace_back(resolve(a), resolve(b));
  }
  if (out.empty()) throw DataError("pair list '" + list.string() + "' is empty");
  return out;
}

int cmd_train(const std::string& pair_list, const std::string& out, const std::string& log, const std::string& resume,
              const ConfigSources& src) {
  RunConfig config = src.resolve();
  const auto pairs = read_pair_list(pair_list);
  std::map<fs::path, int> index;
  std::vector<ShapeData> shapes;
  std::vector<std::pair<int, int>> ids;
  auto id_of = [&](const fs::path& p) {
    const fs::path key = p.lexically_normal();
    auto it = index.find(key);
    if (it != index.end()) return it->second;
    shapes.push_back(load_shape(p, config));
    return index[key] = static_cast<int>(shapes.size()) - 1;
  };
  for (const auto& [a, b] : pairs) {
    const int ia = id_of(a);
    const int ib = id_of(b);
    ids.emplace_back(ia, ib);
  }
  config.train.checkpoint = out;
  config.train.loss_log = log.empty() ? fs::path(out + ".loss.csv") : fs::path(log);

  TrainState state;
  if (!resume.empty()) {
    state = load_checkpoint(resume);
    const NetworkConfig& a = state.params.config;
    const NetworkConfig& b = config.train.network;
    if (a.channels != b.channels || a.blocks != b.blocks || a.out_dim != b.out_dim || a.mlp_hidden != b.mlp_hidden ||
        a.knn != b.knn) {
      throw UsageError("network configuration differs from the checkpoint being resumed");
    }
    note("resuming from " + resume + " at step " + std::to_string(state.step));
  } else {
    state = init_train_state(config.train);
  }
  train_loop(state, shapes, ids, config.train, [](const StepReport& r) {
    std::cout << "step " << r.step << " pair " << r.pair << " loss " << std::setprecision(8) << r.total << '\n';
  });
  save_checkpoint(state, out);
  std::cout << "checkpoint " << out << " (step " << state.step << ")\n";
  return 0;
}

// --- match -----------------------------------------------------------------

struct MatchArgs {
  std::string mesh_x, mesh_y, checkpoint, out, dump_c, dump_q, dump_pi;
  bool random_init = false;
};

int cmd_match(const MatchArgs& args, const ConfigSources& src) {
  RunConfig config = src.resolve();
  const NetworkParams params = resolve_params(args.checkpoint, args.random_init, config);
  config.train.network = params.config;
  const ShapeData x = load_shape(args.mesh_x, config);
  const ShapeData y = load_shape(args.mesh_y, config);
  const Eigen::MatrixXd fx = compute_features(params, x);
  const Eigen::MatrixXd fy = compute_features(params, y);
  const IndexMap map = predict_map_from_features(fx, fy);
  write_index_file(map, args.out);
  if (!args.dump_c.empty()) {
    const Eigen::MatrixXd c = solve_fmap(feature_coeffs(x.bundle.basis, fx), feature_coeffs(y.bundle.basis, fy),
                                         x.bundle.basis.evals, y.bundle.basis.evals, config.train.objective.gamma);
    write_text(args.dump_c, matrix_csv(c));
  }
  if (!args.dump_q.empty()) {
    const Eigen::MatrixXcd q = solve_cfmap(gradient_features(x.bundle.ops, fx), gradient_features(y.bundle.ops, fy),
                                           x.bundle.conn_basis, y.bundle.conn_basis, config.train.objective.gamma_q);
    write_text(args.dump_q, complex_matrix_csv(q));
  }
  if (!args.dump_pi.empty()) {
    Eigen::MatrixXd ux = fx.rowwise().normalized();
    Eigen::MatrixXd uy = fy.rowwise().normalized();
    write_text(args.dump_pi, matrix_csv(soft_pointwise(ux, uy, config.train.objective.tau)));
  }
  std::cout << "wrote " << args.out << " (" << map.size() << " matches)\n";
  return 0;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, sym_gt, mesh_y, list, csv, pair_id = "pair0", setting = "I/I";
};

EvalRow eval_row(const std::string& pair_id, const std::string& setting, const fs::path& pred, const fs::path& gt,
                 const fs::path& mesh_y, const std::string& sym_gt) {
  setting_from_string(setting);
  const Mesh y = read_mesh(mesh_y);
  const IndexMap p = read_index_file(pred);
  const IndexMap g = read_index_file(gt);
  EvalRow row{pair_id, setting, mean_geo_err(p, g, y), false};
  if (!sym_gt.empty()) {
    const SymFlipReport f = count_sym_flips({p}, {g}, {read_index_file(sym_gt)}, {&y});
    row.flipped = f.flips > 0;
  }
  return row;
}

int cmd_eval(const EvalArgs& a) {
  EvalReport report;
  if (!a.list.empty()) {
    // pair_id setting pred gt mesh_y [sym_gt], paths relative to the list.
    const fs::path list(a.list);
    std::ifstream in(list);
    if (!in) throw DataError("cannot read eval list '" + a.list + "'");
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      std::istringstream ls(line);
      std::vector<std::string> f;
      for (std::string t; ls >> t;) f.push_back(t);
      if (f.empty()) continue;
      if (f.size() != 5 && f.size() != 6) {
        throw DataError(a.list + ":" + std::to_string(number) + ": expected pair_id setting pred gt mesh_y [sym_gt]");
      }
      auto rel = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : list.parent_path() / p; };
      report.rows.push_back(
          eval_row(f[0], f[1], rel(f[2]), rel(f[3]), rel(f[4]), f.size() == 6 ? rel(f[5]).string() : std::string()));
    }
  } else {
    if (a.pred.empty() || a.gt.empty() || a.mesh_y.empty()) {
      throw UsageError("eval needs --pred, --gt and --mesh-y (or --list)");
    }
    report.rows.push_back(eval_row(a.pair_id, a.setting, a.pred, a.gt, a.mesh_y, a.sym_gt));
  }
  if (!a.csv.empty()) {
    write_text(a.csv, report.to_csv());
  } else {
    std::cout << report.to_csv();
  }
  std::cout << report.summary();
  return 0;
}

// --- export-colors -----------------------------------------------------------

std::array<std::uint8_t, 3> to_rgb(double r, double g, double b) {
  auto q = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  return {q(r), q(g), q(b)};
}

// Position colors: bounding box mapped onto the RGB cube.
std::vector<std::array<std::uint8_t, 3>> position_colors(const Mesh& m) {
  const Eigen::RowVector3d lo = m.vertices().colwise().minCoeff();
  const Eigen::RowVector3d span = (m.vertices().colwise().maxCoeff() - lo).cwiseMax(1e-300);
  std::vector<std::array<std::uint8_t, 3>> out;
  for (int i = 0; i < m.num_vertices(); ++i) {
    const Eigen::RowVector3d t = (m.vertices().row(i) - lo).cwiseQuotient(span);
    out.push_back(to_rgb(t[0], t[1], t[2]));
  }
  return out;
}

struct ColorArgs {
  std::string mesh, out, correspondence, target, checkpoint;
  int heat_vertex = -1;
  bool random_init = false;
  bool binary = false;
};

int cmd_export_colors(const ColorArgs& a, const ConfigSources& src) {
  const Mesh mesh = read_mesh(a.mesh);
  std::vector<std::array<std::uint8_t, 3>> colors;
  if (!a.correspondence.empty()) {
    if (a.target.empty()) throw UsageError("--correspondence needs --target (the mesh the indices point into)");
    const IndexMap corr = read_index_file(a.correspondence);
    const Mesh target = read_mesh(a.target);
    if (static_cast<int>(corr.size()) != mesh.num_vertices()) {
      throw DataError("correspondence has " + std::to_string(corr.size()) + " entries for " +
                      std::to_string(mesh.num_vertices()) + " vertices");
    }
    const auto target_colors = position_colors(target);
    for (const int j : corr) {
      if (j < 0 || j >= target.num_vertices()) throw DataError("correspondence index outside the target mesh");
      colors.push_back(target_colors[static_cast<std::size_t>(j)]);
    }
  } else if (a.heat_vertex >= 0) {
    RunConfig config = src.resolve();
    const NetworkParams params = resolve_params(a.checkpoint, a.random_init, config);
    config.train.network = params.config;
    if (a.heat_vertex >= mesh.num_vertices()) throw UsageError("--heat-vertex is outside the mesh");
    const ShapeData s = shape_for(normalize_unit_area(mesh), config);
    const Eigen::MatrixXd f = compute_features(params, s).rowwise().normalized();
    const Eigen::VectorXd sim = f * f.row(a.heat_vertex).transpose();
    const double lo = sim.minCoeff();
    const double span = std::max(sim.maxCoeff() - lo, 1e-300);
    // White (dissimilar) to dark red (most similar).
    for (long i = 0; i < sim.size(); ++i) {
      const double t = (sim[i] - lo) / span;
      colors.push_back(to_rgb(1.0 - 0.45 * t, 1.0 - t, 1.0 - t));
    }
  } else {
    throw UsageError("export-colors needs --correspondence/--target or --heat-vertex");
  }
  write_text(a.out, serialize_colored_ply(mesh, colors, a.binary ? PlyEncoding::kBinaryLittleEndian : PlyEncoding::kAscii));
  std::cout << "wrote " << a.out << '\n';
  return 0;
}

// --- selfcheck -----------------------------------------------------------------

int cmd_selfcheck(bool inject, std::uint64_t seed) {
  SelfCheckOptions o;
  o.inject_sign_flip = inject;
  o.seed = seed;
  bool all = true;
  for (const CheckResult& r : run_selfcheck(o)) {
    all = all && r.passed;
    std::cout << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(32) << r.name << std::right
              << std::scientific << std::setprecision(2) << " value " << r.value << " tol " << r.tolerance;
    if (!r.detail.empty()) std::cout << "  " << r.detail;
    std::cout << '\n' << std::defaultfloat;
  }
  std::cout << (all ? "selfcheck passed\n" : "selfcheck FAILED\n");
  return all ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rino: rotation-invariant non-rigid shape correspondence"};
  app.require_subcommand(1);

  ConfigSources pre_src, train_src, match_src, color_src;

  auto* pre = app.add_subcommand("precompute", "Build and cache operators and spectral bases");
  std::vector<std::string> pre_meshes;
  pre->add_option("meshes", pre_meshes, "Mesh files (OFF, OBJ, PLY)")->required()->check(CLI::ExistingFile);
  add_config_flags(pre, pre_src);

  auto* train = app.add_subcommand("train", "Unsupervised training on a list of shape pairs");
  std::string pair_list, train_out, train_log, resume;
  train->add_option("--pairs", pair_list, "Text file with two mesh paths per line")->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "Checkpoint path")->required();
  train->add_option("--log", train_log, "Loss CSV (default: <out>.loss.csv)");
  train->add_option("--resume", resume, "Continue from this checkpoint")->check(CLI::ExistingFile);
  add_config_flags(train, train_src);

  auto* match = app.add_subcommand("match", "Correspondence X -> Y by feature nearest neighbors");
  MatchArgs margs;
  match->add_option("mesh_x", margs.mesh_x)->required()->check(CLI::ExistingFile);
  match->add_option("mesh_y", margs.mesh_y)->required()->check(CLI::ExistingFile);
  match->add_option("--checkpoint", margs.checkpoint, "Trained parameters");
  match->add_flag("--random-init", margs.random_init, "Use randomly initialized weights (seeded)");
  match->add_option("--out", margs.out, "Correspondence file, one Y index per X vertex")->required();
  match->add_option("--dump-c", margs.dump_c, "Write the functional map C as CSV");
  match->add_option("--dump-q", margs.dump_q, "Write the complex map Q as CSV (re, im column pairs)");
  match->add_option("--dump-pi", margs.dump_pi, "Write the soft map (n_X x n_Y) as CSV");
  add_config_flags(match, match_src);

  auto* eval = app.add_subcommand("eval", "Geodesic error report");
  EvalArgs eargs;
  eval->add_option("--pred", eargs.pred, "Predicted correspondence file");
  eval->add_option("--gt", eargs.gt, "Ground-truth correspondence file");
  eval->add_option("--sym-gt", eargs.sym_gt, "Symmetric ground truth (enables flip detection)");
  eval->add_option("--mesh-y", eargs.mesh_y, "Target mesh");
  eval->add_option("--pair-id", eargs.pair_id, "Pair identifier in the report");
  eval->add_option("--setting", eargs.setting, "Rotation setting label: I/I, I/SO(3), SO(3)/SO(3), Y/Y");
  eval->add_option("--list", eargs.list, "Rows 'pair_id setting pred gt mesh_y [sym_gt]'")->check(CLI::ExistingFile);
  eval->add_option("--csv", eargs.csv, "Write the CSV report here instead of stdout");

  auto* colors = app.add_subcommand("export-colors", "Colored PLY: correspondence transfer or feature heat map");
  ColorArgs cargs;
  colors->add_option("mesh", cargs.mesh, "Mesh to color")->required()->check(CLI::ExistingFile);
  colors->add_option("--out", cargs.out, "Output PLY")->required();
  colors->add_option("--correspondence", cargs.correspondence, "Map from this mesh into --target");
  colors->add_option("--target", cargs.target, "Mesh whose position colors are transferred");
  colors->add_option("--heat-vertex", cargs.heat_vertex, "Feature similarity to this vertex (darker red = closer)");
  colors->add_option("--checkpoint", cargs.checkpoint, "Trained parameters for --heat-vertex");
  colors->add_flag("--random-init", cargs.random_init, "Random weights for --heat-vertex");
  colors->add_flag("--binary", cargs.binary, "Binary little-endian PLY");
  add_config_flags(colors, color_src);

  auto* check = app.add_subcommand("selfcheck", "Invariance, gradient and solver checks; exit 0 iff all pass");
  bool inject = false;
  std::uint64_t check_seed = 1;
  check->add_flag("--inject-sign-flip", inject, "Test fixture: corrupt the gradient layer (checks must fail)");
  check->add_option("--seed", check_seed, "Seed of the random meshes, weights and rotations");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*pre) return cmd_precompute(pre_meshes, pre_src);
    if (*train) return cmd_train(pair_list, train_out, train_log, resume, train_src);
    if (*match) return cmd_match(margs, match_src);
    if (*eval) return cmd_eval(eargs);
    if (*colors) return cmd_export_colors(cargs, color_src);
    if (*check) return cmd_selfcheck(inject, check_seed);
  } catch (const UsageError& e) {
    note(std::string("usage error: ") + e.what());
    return 1;
  } catch (const NumericalError& e) {
    note(std::string("numerical failure: ") + e.what());
    return 3;
  } catch (const DataError& e) {
    note(std::string("data error: ") + e.what());
    return 2;
  } catch (const std::exception& e) {
    note(std::string("error: ") + e.what());
    return 2;
  }
  return 1;
}
