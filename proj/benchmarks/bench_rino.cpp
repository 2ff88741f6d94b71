#include <benchmark/benchmark.h>

#include "rino/eval.hpp"
#include "rino/maps.hpp"
#include "rino/operators.hpp"
#include "rino/rinonet.hpp"
#include "rino/synthetic.hpp"
#include "rino/training.hpp"

#include <map>
#include <random>

namespace {

rino::Mesh sphere_mesh(int subdivisions) {
  return rino::normalize_unit_area(rino::perturb_gaussian(rino::icosphere(subdivisions), 1e-3, 3));
}

rino::Mesh bar_mesh(double bend, std::uint64_t seed) {
  rino::SyntheticParams p;
  p.bend_angle = bend;
  return rino::normalize_unit_area(
      rino::perturb_gaussian(rino::gen_synthetic(rino::SyntheticKind::kBentBar, p, 0).mesh, 2e-3, seed));
}

const rino::ShapeData& cached_shape(int subdivisions) {
  static std::map<int, rino::ShapeData> shapes;
  auto it = shapes.find(subdivisions);
  if (it == shapes.end()) {
    it = shapes.emplace(subdivisions, rino::prepare_shape(sphere_mesh(subdivisions), {30, 30}, 16)).first;
  }
  return it->second;
}

void BM_Eigensolver(benchmark::State& state) {
  const rino::Operators ops = rino::build_operators(sphere_mesh(static_cast<int>(state.range(0))));
  const int k = static_cast<int>(state.range(1));
  for (auto _ : state) {
    rino::EigsResult r = rino::eigs_shift_invert(ops.stiffness, ops.mass, k);
    benchmark::DoNotOptimize(r.values.data());
  }
  state.counters["vertices"] = static_cast<double>(ops.mass.size());
}
BENCHMARK(BM_Eigensolver)->Args({3, 30})->Args({4, 30})->Args({4, 100})->Unit(benchmark::kMillisecond);

void BM_BundleBuild(benchmark::State& state) {
  const rino::Mesh mesh = sphere_mesh(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    rino::ShapeBundle b = rino::build_shape_bundle(mesh, 40, 20);
    benchmark::DoNotOptimize(b.basis.evals.data());
  }
  state.counters["vertices"] = static_cast<double>(mesh.num_vertices());
}
BENCHMARK(BM_BundleBuild)->Arg(2)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_FmapSolve(benchmark::State& state) {
  const int k = static_cast<int>(state.range(0));
  const int d = 256;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  Eigen::MatrixXd a = Eigen::MatrixXd::NullaryExpr(k, d, [&] { return g(rng); });
  Eigen::MatrixXd b = Eigen::MatrixXd::NullaryExpr(k, d, [&] { return g(rng); });
  Eigen::VectorXd ex = Eigen::VectorXd::LinSpaced(k, 0.0, 50.0);
  Eigen::VectorXd ey = Eigen::VectorXd::LinSpaced(k, 0.0, 55.0);
  for (auto _ : state) {
    Eigen::MatrixXd c = rino::solve_fmap(a, b, ex, ey, 1e-3);
    benchmark::DoNotOptimize(c.data());
  }
}
BENCHMARK(BM_FmapSolve)->Arg(30)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_Forward(benchmark::State& state) {
  const rino::ShapeData& shape = cached_shape(static_cast<int>(state.range(0)));
  const rino::NetworkParams params = rino::init_params(1);
  for (auto _ : state) {
    Eigen::MatrixXd f = rino::compute_features(params, shape);
    benchmark::DoNotOptimize(f.data());
  }
  state.counters["vertices"] = static_cast<double>(shape.mesh.num_vertices());
}
BENCHMARK(BM_Forward)->Arg(2)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  static const rino::ShapeData x = rino::prepare_shape(bar_mesh(0.0, 1), {30, 30}, 16);
  static const rino::ShapeData y = rino::prepare_shape(bar_mesh(0.5, 2), {30, 30}, 16);
  rino::TrainConfig cfg;
  rino::TrainState s = rino::init_train_state(cfg);
  for (auto _ : state) {
    rino::StepReport r = rino::train_step(s, x, y, cfg);
    benchmark::DoNotOptimize(r.total);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond)->Iterations(5);

}  // namespace

BENCHMARK_MAIN();
