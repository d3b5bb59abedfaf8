// Active-learning shot selection (k-means over class-token features, medoid
// representatives) and loss-based neighborhood mining over the base dataset.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mgvit/common.hpp"
#include "mgvit/tensor.hpp"
#include "mgvit/vit.hpp"

namespace mgvit::select {

struct FeatureMatrix {
  std::size_t dim = 0;
  std::vector<int> ids;        // one per row, unique
  std::vector<double> rows;    // n x dim, row-major

  std::size_t n() const { return ids.size(); }
  const double* row(std::size_t i) const { return rows.data() + i * dim; }

  void validate() const {
    if (rows.size() != ids.size() * dim) throw ShapeError("feature matrix storage mismatch");
    for (double v : rows) {
      if (std::isnan(v)) throw InputError("NaN in feature matrix");
    }
    std::vector<int> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw InputError("duplicate sample ids in feature matrix");
    }
  }
};

// An N-way-K-shot episode: per-class selected shots, mined base neighborhood,
// and the held-out novel test split.
struct FewShotTask {
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::uint64_t seed = 0;
  std::map<int, std::vector<int>> shot_ids;  // class label -> sample ids
  std::vector<int> neighborhood_ids;
  std::vector<int> test_ids;

  std::vector<int> all_shot_ids() const {
    std::vector<int> out;
    for (const auto& [cls, ids] : shot_ids) out.insert(out.end(), ids.begin(), ids.end());
    return out;
  }
};

// Final-layer class-token embedding from the vanilla forward pass, one row per
// image.
inline FeatureMatrix extract_features(const vit::ParameterStore& params,
                                      const vit::ModelConfig& cfg,
                                      const std::vector<std::pair<int, const Tensor*>>& images) {
  FeatureMatrix fm;
  fm.dim = cfg.embed_dim;
  fm.ids.resize(images.size());
  fm.rows.assign(images.size() * cfg.embed_dim, 0.0);
  parallel_for(images.size(), [&](std::size_t i) {
    NoGrad eval;
    fm.ids[i] = images[i].first;
    const vit::TokenSequence z = vit::forward_vanilla(*images[i].second, params, cfg);
    const std::size_t cls = z.layout.cls_index();
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
      fm.rows[i * cfg.embed_dim + j] = z.tokens(cls, j);
    }
  });
  fm.validate();
  return fm;
}

namespace detail_sel {

inline double sq_dist(const double* a, const double* b, std::size_t dim) {
  double acc = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    const double d = a[j] - b[j];
    acc += d * d;
  }
  return acc;
}

}  // namespace detail_sel

struct KMeansResult {
  std::vector<int> assignment;       // n entries, cluster index in [0, k)
  std::vector<double> centroids;     // k x dim
  double inertia = 0.0;
  std::size_t iterations = 0;
  std::vector<double> inertia_trace; // per Lloyd iteration, after update
};

// Lloyd's algorithm with k-means++ seeding. Terminates on stable assignments
// or after 100 iterations. Empty clusters are repaired by stealing the point
// farthest from the centroid of the largest cluster.
inline KMeansResult kmeans(const FeatureMatrix& fm, std::size_t k, std::uint64_t seed) {
  const std::size_t n = fm.n(), dim = fm.dim;
  if (k == 0 || k > n) {
    throw InputError("kmeans k=" + std::to_string(k) + " for " + std::to_string(n) + " rows");
  }
  Rng rng(seed);

  // k-means++ seeding
  std::vector<double> centroids(k * dim);
  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  {
    const std::size_t first = static_cast<std::size_t>(rng.uniform_int(n));
    std::copy_n(fm.row(first), dim, centroids.begin());
    for (std::size_t c = 1; c < k; ++c) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        min_d2[i] = std::min(min_d2[i], detail_sel::sq_dist(fm.row(i), centroids.data() + (c - 1) * dim, dim));
        total += min_d2[i];
      }
      std::size_t pick = 0;
      if (total > 0.0) {
        const double target = rng.uniform() * total;
        double acc = 0.0;
        pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
          acc += min_d2[i];
          if (acc >= target) {
            pick = i;
            break;
          }
        }
      } else {
        pick = static_cast<std::size_t>(rng.uniform_int(n));
      }
      std::copy_n(fm.row(pick), dim, centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
    }
  }

  KMeansResult res;
  res.assignment.assign(n, -1);
  std::vector<std::size_t> counts(k);
  for (std::size_t iter = 0; iter < 100; ++iter) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d2 = detail_sel::sq_dist(fm.row(i), centroids.data() + c * dim, dim);
        if (d2 < best_d) {
          best_d = d2;
          best = static_cast<int>(c);
        }
      }
      inertia += best_d;
      if (res.assignment[i] != best) {
        res.assignment[i] = best;
        changed = true;
      }
    }

    std::fill(counts.begin(), counts.end(), 0);
    for (int a : res.assignment) ++counts[static_cast<std::size_t>(a)];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t largest = static_cast<std::size_t>(
          std::max_element(counts.begin(), counts.end()) - counts.begin());
      std::size_t farthest = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (res.assignment[i] != static_cast<int>(largest)) continue;
        const double d2 = detail_sel::sq_dist(fm.row(i), centroids.data() + largest * dim, dim);
        if (d2 > far_d) {
          far_d = d2;
          farthest = i;
        }
      }
      res.assignment[farthest] = static_cast<int>(c);
      --counts[largest];
      ++counts[c];
      changed = true;
    }

    res.iterations = iter + 1;
    res.inertia = inertia;
    res.inertia_trace.push_back(inertia);
    if (!changed && iter > 0) break;

    std::fill(centroids.begin(), centroids.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double* c = centroids.data() + static_cast<std::size_t>(res.assignment[i]) * dim;
      const double* r = fm.row(i);
      for (std::size_t j = 0; j < dim; ++j) c[j] += r[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t j = 0; j < dim; ++j) centroids[c * dim + j] /= static_cast<double>(counts[c]);
    }
  }
  res.centroids = std::move(centroids);
  return res;
}

// Per cluster, the medoid: the member minimizing the summed Euclidean distance
// to all other members. Ties break to the lower sample id.
inline std::vector<int> select_representatives(const FeatureMatrix& fm,
                                               const std::vector<int>& assignment, std::size_t k) {
  if (assignment.size() != fm.n()) throw InputError("assignment size mismatch");
  std::vector<int> reps(k, -1);
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      if (assignment[i] == static_cast<int>(c)) members.push_back(i);
    }
    if (members.empty()) throw InternalError("empty cluster " + std::to_string(c));
    double best_sum = std::numeric_limits<double>::infinity();
    int best_id = 0;
    for (std::size_t mi : members) {
      double total = 0.0;
      for (std::size_t mj : members) {
        total += std::sqrt(detail_sel::sq_dist(fm.row(mi), fm.row(mj), fm.dim));
      }
      if (total < best_sum || (total == best_sum && fm.ids[mi] < best_id)) {
        best_sum = total;
        best_id = fm.ids[mi];
      }
    }
    reps[c] = best_id;
  }
  return reps;
}

// Per class independently: k-means with k = k_shot over that class's features,
// then one medoid per cluster.
inline std::map<int, std::vector<int>> select_shots(
    const vit::ParameterStore& params, const vit::ModelConfig& cfg,
    const std::map<int, std::vector<std::pair<int, const Tensor*>>>& by_class, std::size_t k_shot,
    std::uint64_t seed) {
  std::map<int, std::vector<int>> out;
  for (const auto& [cls, images] : by_class) {
    if (images.size() < k_shot) {
      throw InputError("class " + std::to_string(cls) + " has " + std::to_string(images.size()) +
                       " samples, need k_shot=" + std::to_string(k_shot));
    }
    const FeatureMatrix fm = extract_features(params, cfg, images);
    const KMeansResult km = kmeans(fm, k_shot, mix_seed(seed, tag_hash("shots"), static_cast<std::uint64_t>(cls)));
    out[cls] = select_representatives(fm, km.assignment, k_shot);
  }
  return out;
}

// Uniform per-class draw, the random-selection ablation baseline.
inline std::map<int, std::vector<int>> random_shots(
    const std::map<int, std::vector<int>>& ids_by_class, std::size_t k_shot, std::uint64_t seed) {
  std::map<int, std::vector<int>> out;
  for (const auto& [cls, ids] : ids_by_class) {
    if (ids.size() < k_shot) {
      throw InputError("class " + std::to_string(cls) + " has " + std::to_string(ids.size()) +
                       " samples, need k_shot=" + std::to_string(k_shot));
    }
    std::vector<int> pool = ids;
    Rng rng(mix_seed(seed, tag_hash("random-shots"), static_cast<std::uint64_t>(cls)));
    rng.shuffle(pool);
    pool.resize(k_shot);
    out[cls] = std::move(pool);
  }
  return out;
}

// Similarity of a base sample with the novel task: the negative per-sample
// loss under the current (shot-fine-tuned) model. Higher means more similar;
// a zero-loss sample scores 0, the maximum.
inline double neighborhood_similarity(const vit::ParameterStore& params,
                                      const vit::ModelConfig& cfg, const Tensor& image,
                                      int joint_label, double smoothing = 0.0) {
  NoGrad eval;
  const vit::TokenSequence z = vit::forward_vanilla(image, params, cfg);
  const Tensor loss = cross_entropy(vit::classify_head(z, params, cfg), {joint_label}, smoothing);
  return -loss.item();
}

// The `size` ids with highest similarity; ties break to the lower id.
inline std::vector<int> select_neighborhood(std::vector<std::pair<int, double>> id_sim,
                                            std::size_t size) {
  if (size > id_sim.size()) {
    throw InputError("neighborhood size " + std::to_string(size) + " exceeds base pool " +
                     std::to_string(id_sim.size()));
  }
  std::sort(id_sim.begin(), id_sim.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<int> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) out.push_back(id_sim[i].first);
  return out;
}

}  // namespace mgvit::select
