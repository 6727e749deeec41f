// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "slategen/crqvae.hpp"
#include "slategen/dataset.hpp"
#include "slategen/io.hpp"
#include "slategen/synthdata.hpp"

using namespace slategen;
using namespace slategen::synth;

namespace {

std::string dump(const World& w, const std::vector<Session>& sessions) {
  std::string out;
  for (const auto& it : w.items) out += corpus_line({it.id, it.embedding}) + "\n";
  for (const auto& s : sessions) out += session_line(s) + "\n";
  return out;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("slategen_" + name)).string();
}

}  // namespace

TEST(World, NoiselessItemsSitOnCentroidsAndPairWithinTopic) {
  WorldConfig cfg;
  cfg.embedding_noise = 0.0;
  cfg.n_items = 64;
  const World w = generate_world(cfg);
  for (const auto& it : w.items)
    for (std::size_t c = 0; c < cfg.d_in; ++c) EXPECT_NEAR(it.embedding[c], w.centroids[it.topic][c], 1e-12);
  std::vector<std::vector<double>> emb;
  for (const auto& it : w.items) emb.push_back(it.embedding);
  const auto pairs = crq::mine_pairs(emb, 0.8);
  for (std::size_t i = 0; i < emb.size(); ++i) {
    std::set<std::uint32_t> expected;
    for (const auto& other : w.items)
      if (other.id != i && other.topic == w.items[i].topic) expected.insert(other.id);
    EXPECT_EQ(std::set<std::uint32_t>(pairs[i].begin(), pairs[i].end()), expected);
  }
}

TEST(World, SameSeedGivesIdenticalBytes) {
  WorldConfig cfg;
  const World a = generate_world(cfg);
  const World b = generate_world(cfg);
  EXPECT_EQ(dump(a, simulate_sessions(a)), dump(b, simulate_sessions(b)));
  cfg.seed += 1;
  const World c = generate_world(cfg);
  EXPECT_NE(dump(a, simulate_sessions(a)), dump(c, simulate_sessions(c)));
}

TEST(World, TopicClustersAreSeparated) {
  const World w = generate_world(WorldConfig{});
  EXPECT_GT(topic_silhouette(w), 0.5);
}

TEST(World, DegenerateConfigIsRejected) {
  WorldConfig cfg;
  cfg.n_topics = 10;
  cfg.n_items = 5;
  EXPECT_THROW(generate_world(cfg), std::invalid_argument);
  cfg = WorldConfig{};
  cfg.test_sessions = cfg.sessions_per_user;
  EXPECT_THROW(generate_world(cfg), std::invalid_argument);
}

TEST(World, AffinitiesLieOnTheSimplex) {
  const World w = generate_world(WorldConfig{});
  for (const auto& u : w.users) {
    double s = 0.0;
    for (double a : u.affinity) {
      EXPECT_GE(a, 0.0);
      s += a;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Sessions, SingleTopicUserViewsConcentrateOnTopic) {
  WorldConfig cfg;
  cfg.sessions_per_user = 400;
  const World w = generate_world(cfg);
  User u;
  u.id = 0;
  u.affinity.assign(cfg.n_topics, 0.0);
  u.affinity[3] = 1.0;
  u.features = u.affinity;
  std::size_t on = 0, total = 0;
  for (const auto& s : simulate_user(w, u))
    for (std::size_t i = 0; i < s.slate.size(); ++i)
      if (s.effective[i]) {
        ++total;
        on += w.items[s.slate[i]].topic == 3 ? 1 : 0;
      }
  ASSERT_GT(total, 100u);
  EXPECT_GE(static_cast<double>(on) / static_cast<double>(total), 0.8);
}

TEST(Sessions, ZeroAffinityTopicFloorsAtNoise) {
  const World w = generate_world(WorldConfig{});
  User u;
  u.affinity.assign(w.cfg.n_topics, 0.0);
  u.affinity[0] = 1.0;
  for (const auto& it : w.items)
    if (it.topic != 0) EXPECT_DOUBLE_EQ(effective_probability(w, u, it), w.cfg.view_noise);
}

TEST(Sessions, RecordsRoundTrip) {
  const World w = generate_world(WorldConfig{});
  const auto sessions = simulate_sessions(w);
  std::string text;
  for (const auto& s : sessions) text += session_line(s) + "\n";
  const auto path = temp_path("sessions.jsonl");
  write_file_atomic(path, text);
  const auto back = read_sessions(path);
  ASSERT_EQ(back.size(), sessions.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].slate, sessions[i].slate);
    EXPECT_EQ(back[i].feedback, sessions[i].feedback);
    EXPECT_EQ(back[i].effective, sessions[i].effective);
    EXPECT_EQ(back[i].history, sessions[i].history);
    EXPECT_EQ(back[i].disliked, sessions[i].disliked);
    EXPECT_EQ(back[i].test, sessions[i].test);
  }
  std::filesystem::remove(path);
}

TEST(Sessions, PerUserStreamsAreOrderIndependent) {
  const World w = generate_world(WorldConfig{});
  const auto all = simulate_sessions(w);
  const auto one = simulate_user(w, w.users[7]);
  const std::size_t per = w.cfg.sessions_per_user;
  for (std::size_t s = 0; s < per; ++s) EXPECT_EQ(session_line(all[7 * per + s]), session_line(one[s]));
}

TEST(Sessions, EffectiveViewsOutrankSkipsInFeedback) {
  const World w = generate_world(WorldConfig{});
  for (const auto& s : simulate_sessions(w))
    for (std::size_t i = 0; i < s.slate.size(); ++i)
      for (std::size_t j = 0; j < s.slate.size(); ++j)
        if (s.effective[i] && !s.effective[j]) EXPECT_GT(s.feedback[i], s.feedback[j]);
}

TEST(Sessions, OracleRecallBeatsRandomThreefold) {
  const World w = generate_world(WorldConfig{});
  const auto sessions = simulate_sessions(w);
  const std::size_t m = w.cfg.slate_size;
  double oracle = 0.0;
  std::size_t users = 0;
  for (const auto& u : w.users) {
    std::set<std::uint32_t> truth;
    for (const auto& s : sessions)
      if (s.user_id == u.id && s.test)
        for (std::size_t i = 0; i < s.slate.size(); ++i)
          if (s.effective[i]) truth.insert(s.slate[i]);
    if (truth.empty()) continue;
    std::size_t hit = 0;
    for (auto id : oracle_slate(w, u, m)) hit += truth.count(id);
    oracle += static_cast<double>(hit) / static_cast<double>(truth.size());
    ++users;
  }
  ASSERT_GT(users, 0u);
  oracle /= static_cast<double>(users);
  // A uniformly random slate recovers m/n_items of any truth set in expectation.
  const double random = static_cast<double>(m) / static_cast<double>(w.cfg.n_items);
  EXPECT_GE(oracle, 3.0 * random);
}
