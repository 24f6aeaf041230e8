#pragma once

// Desk-scale multimodal dataset with a known next-item rule.
//
// Every item i has a latent style s_i ~ N(0, I). The item following i is
//   next(i) = argmin_{j != i} |s_j - M s_i|^2   (ties -> smaller id)
// for a fixed random matrix M. Text and image features are two independent
// random linear projections of the style plus N(0, noise_sigma^2) noise.

#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "findrec/data.hpp"

namespace findrec {

struct SynthConfig {
  std::size_t n_users = 100;
  std::size_t n_items = 50;
  std::size_t style_dim = 8;
  std::size_t min_len = 5;
  std::size_t max_len = 40;
  double noise_sigma = 0.0;
  std::size_t text_dim = 32;
  std::size_t image_dim = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_items < 2) throw ConfigError("synthetic data needs at least 2 items");
    if (n_users < 1) throw ConfigError("synthetic data needs at least 1 user");
    if (style_dim < 1 || text_dim < 1 || image_dim < 1) throw ConfigError("synthetic dims must be positive");
    if (min_len < 1 || min_len > max_len) throw ConfigError("synthetic length range is empty");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  }
};

struct SyntheticData {
  SynthConfig cfg;
  Tensor styles;      // (n_items, style_dim); row i is item id i + 1
  Tensor transition;  // (style_dim, style_dim)
  std::vector<std::int64_t> next_item;  // next_item[id], [0] unused
  std::vector<Interaction> interactions;
  FeatureTable text;
  FeatureTable image;
};

// Nearest catalog item (excluding `from`) to transition * style(from).
inline std::int64_t synthetic_next(const Tensor& styles, const Tensor& transition, std::int64_t from) {
  const std::size_t n = styles.dim(0), d = styles.dim(1);
  std::vector<double> target(d, 0.0);
  const auto src = static_cast<std::size_t>(from - 1);
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b < d; ++b) target[a] += transition.at(a, b) * styles.at(src, b);
  }
  std::int64_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (j == src) continue;
    double dist = 0.0;
    for (std::size_t a = 0; a < d; ++a) dist += (styles.at(j, a) - target[a]) * (styles.at(j, a) - target[a]);
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<std::int64_t>(j + 1);
    }
  }
  return best;
}

inline SyntheticData generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  SyntheticData out;
  out.cfg = cfg;
  Rng rng(cfg.seed);
  const std::size_t n = cfg.n_items, d = cfg.style_dim;
  out.styles = rng.normal_tensor({n, d}, 1.0);
  out.transition = rng.normal_tensor({d, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  out.next_item.assign(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    out.next_item[i] = synthetic_next(out.styles, out.transition, static_cast<std::int64_t>(i));
  }

  auto project = [&](std::size_t dim, Modality m) {
    FeatureTable t;
    t.modality = m;
    t.dim = static_cast<std::uint32_t>(dim);
    Tensor proj = rng.normal_tensor({d, dim}, 1.0 / std::sqrt(static_cast<double>(d)));
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<float> v(dim);
      for (std::size_t k = 0; k < dim; ++k) {
        double acc = 0.0;
        for (std::size_t a = 0; a < d; ++a) acc += out.styles.at(i, a) * proj.at(a, k);
        if (cfg.noise_sigma > 0.0) acc += rng.normal(0.0, cfg.noise_sigma);
        v[k] = static_cast<float>(acc);
      }
      t.vectors.emplace(static_cast<std::int64_t>(i + 1), std::move(v));
    }
    return t;
  };
  out.text = project(cfg.text_dim, Modality::Text);
  out.image = project(cfg.image_dim, Modality::Image);

  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    const auto len = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(cfg.min_len), static_cast<std::int64_t>(cfg.max_len)));
    std::int64_t item = rng.uniform_int(1, static_cast<std::int64_t>(n));
    const std::int64_t t0 = 1'600'000'000 + static_cast<std::int64_t>(u) * 100'000;
    for (std::size_t k = 0; k < len; ++k) {
      out.interactions.push_back({static_cast<std::int64_t>(u), item, t0 + static_cast<std::int64_t>(k) * 60});
      item = out.next_item[static_cast<std::size_t>(item)];
    }
  }
  return out;
}

inline nlohmann::json synthetic_truth_json(const SyntheticData& s) {
  auto rows = [](const Tensor& t) {
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t i = 0; i < t.dim(0); ++i) {
      nlohmann::json r = nlohmann::json::array();
      for (std::size_t j = 0; j < t.dim(1); ++j) r.push_back(t.at(i, j));
      arr.push_back(std::move(r));
    }
    return arr;
  };
  nlohmann::json j;
  j["style_dim"] = s.cfg.style_dim;
  j["transition_matrix"] = rows(s.transition);
  j["item_styles"] = rows(s.styles);
  j["rule"] =
      "next(i) = argmin over j != i of ||item_styles[j-1] - transition_matrix * item_styles[i-1]||^2, "
      "ties to the smaller id; item ids are 1-based";
  j["n_items"] = s.cfg.n_items;
  j["n_users"] = s.cfg.n_users;
  j["noise_sigma"] = s.cfg.noise_sigma;
  j["seed"] = s.cfg.seed;
  return j;
}

// Writes interactions.tsv, text.frf, image.frf and truth.json into `dir`.
inline void write_synthetic(const SyntheticData& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_interactions(dir / "interactions.tsv", s.interactions);
  write_features(dir / "text.frf", s.text);
  write_features(dir / "image.frf", s.image);
  std::ofstream out(dir / "truth.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "truth.json").string());
  out << synthetic_truth_json(s).dump(2) << '\n';
}

inline PreparedData prepare_synthetic(const SyntheticData& s) {
  return prepare_data(build_dataset(s.interactions), s.text, s.image);
}

}  // namespace findrec
