#include "rino/pipeline.hpp"

#include "rino/error.hpp"

namespace rino {

std::filesystem::path cache_file_for(const std::filesystem::path& cache_dir, const Mesh& mesh, int k, int k_q) {
  return cache_dir / (to_hex(operator_cache_key(mesh, k, k_q)) + ".rino");
}

ShapeBundle cached_bundle(const Mesh& mesh, int k, int k_q, const std::filesystem::path& cache_dir,
                          BundleSource* source) {
  BundleSource local;
  BundleSource& src = source ? *source : local;
  if (cache_dir.empty()) {
    ShapeBundle b = build_shape_bundle(mesh, k, k_q);
    src.messages.insert(src.messages.end(), b.ops.warnings.begin(), b.ops.warnings.end());
    return b;
  }
  const Digest key = operator_cache_key(mesh, k, k_q);
  const std::filesystem::path file = cache_file_for(cache_dir, mesh, k, k_q);
  try {
    CacheLookup hit = cache_load(file, key);
    if (hit.bundle) {
      src.cache_hit = true;
      src.messages.push_back("cache hit: " + file.string());
      effective_basis_size(k, mesh.num_vertices(), &src.messages);
      effective_basis_size(k_q, mesh.num_vertices(), &src.messages);
      return std::move(*hit.bundle);
    }
    src.messages.push_back("cache miss: " + hit.diagnostic);
  } catch (const ChecksumError& e) {
    src.messages.push_back("warning: corrupted cache file " + file.string() + " (" + e.what() + "); rebuilding");
  }
  ShapeBundle b = build_shape_bundle(mesh, k, k_q);
  src.messages.insert(src.messages.end(), b.ops.warnings.begin(), b.ops.warnings.end());
  std::error_code ec;
  std::filesystem::create_directories(cache_dir, ec);
  if (ec) throw DataError("cannot create cache directory '" + cache_dir.string() + "': " + ec.message());
  cache_store(file, key, b);
  return b;
}

Mesh load_normalized_mesh(const std::filesystem::path& path) {
  try {
    return normalize_unit_area(read_mesh(path));
  } catch (const DataError& e) {
    const std::string what = e.what();
    if (what.find(path.string()) != std::string::npos) throw;
    throw DataError(path.string() + ": " + what);
  }
}

ShapeData shape_for(const Mesh& mesh, const RunConfig& config, BundleSource* source) {
  return make_shape_data(mesh, cached_bundle(mesh, config.pipeline.k, config.pipeline.k_q, config.cache_dir, source),
                         config.train.network.knn);
}

}  // namespace rino
