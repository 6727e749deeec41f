// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "slategen/random.hpp"

// Synthetic world: topic-clustered item embeddings, users with sparse topic
// affinities, and a logging policy whose exposures carry effective-view and
// watch-time feedback.
namespace slategen::synth {

struct WorldConfig {
  std::size_t n_topics = 8;
  std::size_t n_items = 200;
  std::size_t n_users = 50;
  std::size_t d_in = 128;
  // Dirichlet concentration over a user's active topics.
  double topic_concentration = 0.5;
  std::size_t max_user_topics = 3;
  std::size_t sessions_per_user = 12;
  // Trailing sessions per user held out for evaluation.
  std::size_t test_sessions = 2;
  std::size_t slate_size = 5;
  std::size_t max_history = 20;
  // Norm of the Gaussian offset added to a topic centroid.
  double embedding_noise = 0.3;
  // Effective-view probability floor for items the user has no affinity for.
  double view_noise = 0.05;
  // Share of logged exposures drawn uniformly at random.
  double explore = 0.3;
  double feature_noise = 0.1;
  // Non-effective exposures below this relative affinity become dislikes.
  double dislike_threshold = 0.2;
  std::uint64_t seed = 7;
};

struct Item {
  std::uint32_t id = 0;
  std::uint32_t topic = 0;
  double quality = 0.0;
  std::vector<double> embedding;
};

struct User {
  std::uint32_t id = 0;
  std::vector<double> affinity;  // sums to 1
  std::vector<double> features;
};

struct World {
  WorldConfig cfg;
  std::vector<std::vector<double>> centroids;
  std::vector<Item> items;
  std::vector<User> users;
  // Item ids grouped by topic.
  std::vector<std::vector<std::uint32_t>> by_topic;
};

/// One logged slate with its feedback.
struct Session {
  std::uint32_t user_id = 0;
  std::uint32_t index = 0;
  bool test = false;
  std::vector<double> user_features;
  // Effective views before this session, oldest first, at most max_history.
  std::vector<std::uint32_t> history;
  std::vector<std::uint32_t> slate;
  std::vector<double> feedback;
  std::vector<std::uint8_t> effective;
  // Disliked impressions seen up to and including this session.
  std::vector<std::uint32_t> disliked;
};

/// Throws std::invalid_argument on a degenerate config.
World generate_world(const WorldConfig& cfg);

double effective_probability(const World& world, const User& user, const Item& item);

/// Sessions of one user, in order. Depends only on the world and the user.
std::vector<Session> simulate_user(const World& world, const User& user);
/// All users' sessions, user-major.
std::vector<Session> simulate_sessions(const World& world);

/// Mean silhouette of item embeddings under their topic labels (Euclidean).
double topic_silhouette(const World& world);

/// Top-n items by true effective-view probability.
std::vector<std::uint32_t> oracle_slate(const World& world, const User& user, std::size_t n);

}  // namespace slategen::synth
