// SPDX-License-Identifier: Apache-2.0
#include "slategen/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace slategen::synth {

namespace {

// Stream ids for seed splitting; each entity draws from its own stream so
// generation order does not matter.
constexpr std::uint64_t kCentroidStream = 0;
constexpr std::uint64_t kItemStream = 1'000'000;
constexpr std::uint64_t kUserStream = 2'000'000;
constexpr std::uint64_t kSessionStream = 3'000'000;

void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0)
    for (double& x : v) x /= n;
}

double relative_affinity(const User& user, std::uint32_t topic) {
  const double top = *std::max_element(user.affinity.begin(), user.affinity.end());
  return top > 0.0 ? user.affinity[topic] / top : 0.0;
}

std::uint32_t logged_item(const World& w, const User& user, Rng& rng) {
  if (rng.bernoulli(w.cfg.explore)) return static_cast<std::uint32_t>(rng.index(w.items.size()));
  const auto topic = rng.categorical(user.affinity);
  const auto& pool = w.by_topic[topic];
  std::vector<double> weights;
  weights.reserve(pool.size());
  for (auto id : pool) weights.push_back(w.items[id].quality * w.items[id].quality);
  return pool[rng.categorical(weights)];
}

}  // namespace

World generate_world(const WorldConfig& cfg) {
  if (cfg.n_topics == 0 || cfg.n_items == 0 || cfg.n_users == 0 || cfg.d_in == 0 || cfg.slate_size == 0)
    throw std::invalid_argument("world config: counts must be positive");
  if (cfg.n_topics > cfg.n_items)
    throw std::invalid_argument("world config: n_topics " + std::to_string(cfg.n_topics) + " exceeds n_items " +
                                std::to_string(cfg.n_items));
  if (cfg.slate_size > cfg.n_items) throw std::invalid_argument("world config: slate_size exceeds n_items");
  if (cfg.test_sessions >= cfg.sessions_per_user)
    throw std::invalid_argument("world config: test_sessions must leave at least one training session");
  if (cfg.max_user_topics == 0 || cfg.topic_concentration <= 0.0)
    throw std::invalid_argument("world config: user topic prior must be positive");

  World w;
  w.cfg = cfg;
  Rng crng = Rng::split(cfg.seed, kCentroidStream);
  w.centroids.assign(cfg.n_topics, std::vector<double>(cfg.d_in));
  for (auto& c : w.centroids) {
    for (double& x : c) x = crng.normal();
    normalize(c);
  }

  w.by_topic.assign(cfg.n_topics, {});
  const double noise_scale = cfg.embedding_noise / std::sqrt(static_cast<double>(cfg.d_in));
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    Rng rng = Rng::split(cfg.seed, kItemStream + i);
    Item it;
    it.id = static_cast<std::uint32_t>(i);
    it.topic = static_cast<std::uint32_t>(i % cfg.n_topics);
    it.quality = rng.uniform(0.2, 1.0);
    it.embedding = w.centroids[it.topic];
    for (double& x : it.embedding) x += noise_scale * rng.normal();
    normalize(it.embedding);
    w.by_topic[it.topic].push_back(it.id);
    w.items.push_back(std::move(it));
  }

  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    Rng rng = Rng::split(cfg.seed, kUserStream + u);
    User user;
    user.id = static_cast<std::uint32_t>(u);
    user.affinity.assign(cfg.n_topics, 0.0);
    std::vector<std::uint32_t> topics(cfg.n_topics);
    std::iota(topics.begin(), topics.end(), 0u);
    rng.shuffle(topics.begin(), topics.end());
    const std::size_t k = 1 + rng.index(std::min(cfg.max_user_topics, cfg.n_topics));
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += user.affinity[topics[j]] = rng.gamma(cfg.topic_concentration);
    if (total <= 0.0) {
      user.affinity[topics[0]] = 1.0;
      total = 1.0;
    }
    for (double& a : user.affinity) a /= total;
    user.features = user.affinity;
    for (double& f : user.features) f += cfg.feature_noise * rng.normal();
    w.users.push_back(std::move(user));
  }
  return w;
}

double effective_probability(const World& world, const User& user, const Item& item) {
  const double floor = world.cfg.view_noise;
  return floor + (1.0 - floor) * relative_affinity(user, item.topic) * item.quality;
}

std::vector<Session> simulate_user(const World& world, const User& user) {
  const auto& cfg = world.cfg;
  Rng rng = Rng::split(cfg.seed, kSessionStream + user.id);
  std::vector<Session> out;
  std::vector<std::uint32_t> positives, disliked;
  for (std::size_t s = 0; s < cfg.sessions_per_user; ++s) {
    Session ses;
    ses.user_id = user.id;
    ses.index = static_cast<std::uint32_t>(s);
    ses.test = s + cfg.test_sessions >= cfg.sessions_per_user;
    ses.user_features = user.features;
    const std::size_t h0 = positives.size() > cfg.max_history ? positives.size() - cfg.max_history : 0;
    ses.history.assign(positives.begin() + static_cast<std::ptrdiff_t>(h0), positives.end());
    while (ses.slate.size() < cfg.slate_size) {
      const auto id = logged_item(world, user, rng);
      if (std::find(ses.slate.begin(), ses.slate.end(), id) == ses.slate.end()) ses.slate.push_back(id);
    }
    for (auto id : ses.slate) {
      const Item& it = world.items[id];
      const bool eff = rng.bernoulli(effective_probability(world, user, it));
      const double rel = relative_affinity(user, it.topic);
      // Watch-time proxy: every effective view outranks every skip.
      ses.feedback.push_back(rel * it.quality * rng.uniform() + (eff ? 1.0 : 0.0));
      ses.effective.push_back(eff ? 1 : 0);
      if (eff) positives.push_back(id);
      if (!eff && rel < cfg.dislike_threshold &&
          std::find(disliked.begin(), disliked.end(), id) == disliked.end())
        disliked.push_back(id);
    }
    ses.disliked = disliked;
    out.push_back(std::move(ses));
  }
  return out;
}

std::vector<Session> simulate_sessions(const World& world) {
  std::vector<std::vector<Session>> per_user(world.users.size());
  const auto n = static_cast<std::ptrdiff_t>(world.users.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t u = 0; u < n; ++u)
    per_user[static_cast<std::size_t>(u)] = simulate_user(world, world.users[static_cast<std::size_t>(u)]);
  std::vector<Session> out;
  for (auto& v : per_user)
    for (auto& s : v) out.push_back(std::move(s));
  return out;
}

double topic_silhouette(const World& world) {
  const auto& items = world.items;
  const std::size_t n = items.size(), t = world.cfg.n_topics;
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < items[i].embedding.size(); ++c) {
        const double diff = items[i].embedding[c] - items[j].embedding[c];
        d += diff * diff;
      }
      dist[i * n + j] = dist[j * n + i] = std::sqrt(d);
    }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> sum(t, 0.0);
    std::vector<std::size_t> cnt(t, 0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      sum[items[j].topic] += dist[i * n + j];
      ++cnt[items[j].topic];
    }
    const auto own = items[i].topic;
    if (cnt[own] == 0) continue;  // singleton cluster scores 0
    const double a = sum[own] / static_cast<double>(cnt[own]);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < t; ++c)
      if (c != own && cnt[c] > 0) b = std::min(b, sum[c] / static_cast<double>(cnt[c]));
    if (std::isfinite(b)) total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(n);
}

std::vector<std::uint32_t> oracle_slate(const World& world, const User& user, std::size_t n) {
  std::vector<std::uint32_t> ids(world.items.size());
  std::iota(ids.begin(), ids.end(), 0u);
  std::vector<double> p(ids.size());
  for (auto id : ids) p[id] = effective_probability(world, user, world.items[id]);
  std::stable_sort(ids.begin(), ids.end(), [&](auto a, auto b) { return p[a] > p[b]; });
  ids.resize(std::min(n, ids.size()));
  return ids;
}

}  // namespace slategen::synth
