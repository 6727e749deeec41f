// SPDX-License-Identifier: Apache-2.0
#include "slategen/dataset.hpp"

#include <cmath>
#include <unordered_map>
#include <json.hpp>

#include "slategen/io.hpp"

namespace slategen {

namespace {

using nlohmann::json;

template <class Fn>
auto parse_each(const std::string& path, Fn&& fn) {
  std::vector<std::invoke_result_t<Fn, const json&>> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      out.push_back(fn(json::parse(lines[i])));
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(i + 1) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

json sids_json(const std::vector<Sid>& v) {
  json a = json::array();
  for (const auto& s : v) a.push_back(s);
  return a;
}

std::vector<Sid> sids_from(const json& j) {
  std::vector<Sid> out;
  for (const auto& s : j) out.push_back(s.get<Sid>());
  return out;
}

std::vector<double> finite_reals(const json& j, const char* field) {
  auto v = j.get<std::vector<double>>();
  for (double x : v)
    if (!std::isfinite(x)) throw DataError(std::string("non-finite value in ") + field);
  return v;
}

std::vector<std::uint8_t> flags_from(const json& j) {
  std::vector<std::uint8_t> out;
  for (const auto& b : j) out.push_back(b.get<bool>() ? 1 : 0);
  return out;
}

json flags_json(const std::vector<std::uint8_t>& v) {
  json a = json::array();
  for (auto b : v) a.push_back(b != 0);
  return a;
}

}  // namespace

std::string corpus_line(const CorpusItem& item) {
  return json{{"item_id", item.item_id}, {"embedding", item.embedding}}.dump();
}

std::vector<CorpusItem> read_corpus(const std::string& path) {
  auto items = parse_each(path, [](const json& j) {
    return CorpusItem{j.at("item_id").get<std::uint32_t>(), finite_reals(j.at("embedding"), "embedding")};
  });
  if (items.empty()) throw DataError(path + ": empty corpus");
  for (const auto& it : items)
    if (it.embedding.size() != items[0].embedding.size() || it.embedding.empty())
      throw DataError(path + ": item " + std::to_string(it.item_id) + " has embedding length " +
                      std::to_string(it.embedding.size()) + ", expected " +
                      std::to_string(items[0].embedding.size()));
  return items;
}

std::string sid_line(const SidEntry& e) { return json{{"item_id", e.item_id}, {"codes", e.codes}}.dump(); }

std::vector<SidEntry> read_sid_map(const std::string& path) {
  return parse_each(path, [](const json& j) {
    return SidEntry{j.at("item_id").get<std::uint32_t>(), j.at("codes").get<Sid>()};
  });
}

std::string session_line(const synth::Session& s) {
  return json{{"user_id", s.user_id},
              {"session", s.index},
              {"split", s.test ? "test" : "train"},
              {"user_features", s.user_features},
              {"history", s.history},
              {"slate", s.slate},
              {"feedback", s.feedback},
              {"effective_view", flags_json(s.effective)},
              {"disliked", s.disliked}}
      .dump();
}

std::vector<synth::Session> read_sessions(const std::string& path) {
  return parse_each(path, [](const json& j) {
    synth::Session s;
    s.user_id = j.at("user_id").get<std::uint32_t>();
    s.index = j.at("session").get<std::uint32_t>();
    s.test = j.at("split").get<std::string>() == "test";
    s.user_features = finite_reals(j.at("user_features"), "user_features");
    s.history = j.at("history").get<std::vector<std::uint32_t>>();
    s.slate = j.at("slate").get<std::vector<std::uint32_t>>();
    s.feedback = finite_reals(j.at("feedback"), "feedback");
    s.effective = flags_from(j.at("effective_view"));
    s.disliked = j.at("disliked").get<std::vector<std::uint32_t>>();
    if (s.feedback.size() != s.slate.size() || s.effective.size() != s.slate.size())
      throw DataError("feedback length differs from slate length");
    return s;
  });
}

std::string sample_line(const SlateSample& s) {
  return json{{"user_id", s.user_id},
              {"user_features", s.user_features},
              {"history", sids_json(s.history)},
              {"slate", sids_json(s.slate)},
              {"item_ids", s.item_ids},
              {"feedback", s.feedback},
              {"effective_view", flags_json(s.effective)},
              {"disliked", sids_json(s.disliked)},
              {"split", s.test ? "test" : "train"}}
      .dump();
}

std::vector<SlateSample> read_samples(const std::string& path) {
  return parse_each(path, [](const json& j) {
    SlateSample s;
    s.user_features = finite_reals(j.at("user_features"), "user_features");
    s.history = sids_from(j.at("history"));
    s.slate = sids_from(j.at("slate"));
    s.feedback = finite_reals(j.at("feedback"), "feedback");
    s.effective = flags_from(j.at("effective_view"));
    // Optional fields; a minimal record carries only the five above.
    if (j.contains("user_id")) s.user_id = j["user_id"].get<std::uint32_t>();
    if (j.contains("item_ids")) s.item_ids = j["item_ids"].get<std::vector<std::uint32_t>>();
    if (j.contains("disliked")) s.disliked = sids_from(j["disliked"]);
    if (j.contains("split")) s.test = j["split"].get<std::string>() == "test";
    if (s.feedback.size() != s.slate.size() || s.effective.size() != s.slate.size())
      throw DataError("feedback length differs from slate length");
    return s;
  });
}

std::string pair_line(const PairRecord& p) {
  return json{{"context_ref", p.context_ref},
              {"y_plus", sids_json(p.y_plus)},
              {"y_minus", sids_json(p.y_minus)},
              {"strategy", p.strategy}}
      .dump();
}

std::vector<PairRecord> read_pairs(const std::string& path) {
  return parse_each(path, [](const json& j) {
    return PairRecord{j.at("context_ref").get<std::size_t>(), sids_from(j.at("y_plus")),
                      sids_from(j.at("y_minus")), j.at("strategy").get<std::string>()};
  });
}

std::vector<SlateSample> tokenize_sessions(const std::vector<synth::Session>& sessions,
                                           const std::vector<SidEntry>& sid_map) {
  std::unordered_map<std::uint32_t, const Sid*> lookup;
  for (const auto& e : sid_map) lookup[e.item_id] = &e.codes;
  auto sid = [&](std::uint32_t id) -> const Sid& {
    auto it = lookup.find(id);
    if (it == lookup.end()) throw DataError("item " + std::to_string(id) + " has no semantic ID");
    return *it->second;
  };
  std::vector<SlateSample> out;
  for (const auto& ses : sessions) {
    SlateSample s;
    s.user_id = ses.user_id;
    s.user_features = ses.user_features;
    for (auto id : ses.history) s.history.push_back(sid(id));
    for (auto id : ses.slate) s.slate.push_back(sid(id));
    s.item_ids = ses.slate;
    s.feedback = ses.feedback;
    s.effective = ses.effective;
    for (auto id : ses.disliked) s.disliked.push_back(sid(id));
    s.test = ses.test;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace slategen
