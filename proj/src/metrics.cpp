#include "tokmat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace tokmat {

namespace {

void require_n(std::size_t n, const char* who) {
  if (n < 1) throw std::invalid_argument(std::string(who) + ": n must be >= 1");
}

std::string fixed(Scalar v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// Columns padded to the widest cell, left-aligned header row first.
std::string align(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()));
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream out;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) line += "  ";
      line += r[c] + std::string(width[c] - r[c].size(), ' ');
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out << line << '\n';
  }
  return out.str();
}

}  // namespace

Scalar distinct_n(std::span<const TokenId> tokens, std::size_t n) {
  require_n(n, "distinct_n");
  if (tokens.size() < n) return 1.0;
  const std::size_t total = tokens.size() - n + 1;
  std::set<std::vector<TokenId>> seen;
  for (std::size_t i = 0; i < total; ++i) seen.emplace(tokens.begin() + i, tokens.begin() + i + n);
  return static_cast<Scalar>(seen.size()) / static_cast<Scalar>(std::max<std::size_t>(1, total));
}

Scalar rep_n(std::span<const TokenId> tokens, std::size_t n) {
  require_n(n, "rep_n");
  return 1.0 - distinct_n(tokens, n);
}

bool has_trigram_loop(std::span<const TokenId> tokens) {
  if (tokens.size() < 3) return false;
  std::map<std::array<TokenId, 3>, std::size_t> counts;
  for (std::size_t i = 0; i + 3 <= tokens.size(); ++i) {
    if (++counts[{tokens[i], tokens[i + 1], tokens[i + 2]}] >= kLoopThreshold) return true;
  }
  return false;
}

GenerationMetrics generation_metrics(std::span<const TokenId> tokens) {
  GenerationMetrics m;
  for (std::size_t n = 1; n <= 3; ++n) {
    m.distinct[n - 1] = distinct_n(tokens, n);
    m.rep[n - 1] = 1.0 - m.distinct[n - 1];
  }
  m.trigram_loop = has_trigram_loop(tokens);
  m.length = tokens.size();
  return m;
}

RepetitionReport repetition_report(const std::vector<std::vector<TokenId>>& generations) {
  RepetitionReport r;
  for (const auto& g : generations) {
    r.generations.push_back(generation_metrics(g));
    if (g.empty()) ++r.empty_generations;
  }
  if (r.generations.empty()) return r;
  const auto count = static_cast<Scalar>(r.generations.size());
  std::size_t loops = 0;
  for (const auto& g : r.generations) {
    for (std::size_t i = 0; i < 3; ++i) r.mean_distinct[i] += g.distinct[i] / count;
    loops += g.trigram_loop ? 1 : 0;
  }
  for (std::size_t i = 0; i < 3; ++i) r.mean_rep[i] = 1.0 - r.mean_distinct[i];
  r.loop_fraction = static_cast<Scalar>(loops) / count;
  return r;
}

nlohmann::json to_json(const RepetitionReport& r) {
  nlohmann::json gens = nlohmann::json::array();
  for (const auto& g : r.generations) {
    gens.push_back({{"length", g.length},
                    {"distinct_1", g.distinct[0]},
                    {"distinct_2", g.distinct[1]},
                    {"distinct_3", g.distinct[2]},
                    {"rep_1", g.rep[0]},
                    {"rep_2", g.rep[1]},
                    {"rep_3", g.rep[2]},
                    {"trigram_loop", g.trigram_loop}});
  }
  return {{"generations", gens},
          {"count", r.generations.size()},
          {"empty_generations", r.empty_generations},
          {"distinct_1", r.mean_distinct[0]},
          {"distinct_2", r.mean_distinct[1]},
          {"distinct_3", r.mean_distinct[2]},
          {"rep_1", r.mean_rep[0]},
          {"rep_2", r.mean_rep[1]},
          {"rep_3", r.mean_rep[2]},
          {"trigram_loop_fraction", r.loop_fraction}};
}

std::string to_text(const RepetitionReport& r) {
  std::vector<std::vector<std::string>> rows{
      {"#", "len", "distinct-1", "distinct-2", "distinct-3", "rep-2", "loop"}};
  for (std::size_t i = 0; i < r.generations.size(); ++i) {
    const auto& g = r.generations[i];
    rows.push_back({std::to_string(i), std::to_string(g.length), fixed(g.distinct[0]),
                    fixed(g.distinct[1]), fixed(g.distinct[2]), fixed(g.rep[1]),
                    g.trigram_loop ? "yes" : "no"});
  }
  rows.push_back({"mean", "", fixed(r.mean_distinct[0]), fixed(r.mean_distinct[1]),
                  fixed(r.mean_distinct[2]), fixed(r.mean_rep[1]),
                  fixed(r.loop_fraction * 100.0, 1) + "%"});
  return align(rows);
}

EntropyTrajectory entropy_trajectory(std::span<const TailSnapshot> history, std::size_t position,
                                     const EmbeddingTable& table, Scalar temperature) {
  EntropyTrajectory t;
  t.position = position;
  for (const auto& snap : history) {
    if (position < snap.front_position) continue;
    const std::size_t slot = position - snap.front_position;
    if (slot >= snap.updated || slot >= snap.vectors.rows()) continue;
    const auto z = snap.vectors.row(slot);
    t.points.push_back({snap.step, slot, implicit_entropy(z, table, temperature), commit(z, table)});
  }
  if (t.points.empty()) {
    throw std::invalid_argument("entropy_trajectory: no recorded snapshot covers position " +
                                std::to_string(position));
  }
  return t;
}

nlohmann::json to_json(const EntropyTrajectory& t) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : t.points) {
    pts.push_back({{"step", p.step}, {"slot", p.slot}, {"entropy", p.entropy},
                   {"top_candidate", p.top_candidate}});
  }
  return {{"position", t.position}, {"points", pts}};
}

std::string to_text(const EntropyTrajectory& t) {
  std::vector<std::vector<std::string>> rows{{"step", "slot", "entropy", "top"}};
  for (const auto& p : t.points) {
    rows.push_back({std::to_string(p.step), std::to_string(p.slot), fixed(p.entropy),
                    std::to_string(p.top_candidate)});
  }
  return align(rows);
}

std::vector<SweepRow> diversity_sweep(const std::vector<TokenId>& prompt,
                                      std::span<const std::uint64_t> seeds,
                                      std::span<const std::size_t> tail_lengths,
                                      const Predictor& predictor, const EmbeddingTable& table,
                                      const MaturationConfig& base) {
  if (seeds.empty()) throw std::invalid_argument("diversity_sweep: no seeds");
  std::vector<SweepRow> rows;
  for (std::size_t k : tail_lengths) {
    MaturationConfig cfg = base;
    cfg.tail_len = k;
    std::set<std::vector<TokenId>> sequences;
    std::set<TokenId> firsts;
    Scalar d2 = 0.0;
    for (std::uint64_t seed : seeds) {
      GenerationSession session(prompt, cfg, table, seed);
      const auto out = generate(session, predictor, table);
      sequences.insert(out);
      if (!out.empty()) firsts.insert(out.front());
      d2 += distinct_n(out, 2);
    }
    rows.push_back({k, seeds.size(), sequences.size(), firsts.size(),
                    d2 / static_cast<Scalar>(seeds.size())});
  }
  return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::ostringstream s;
  s << "k,seeds,unique_sequences,unique_first_tokens,mean_distinct_2\n";
  for (const auto& r : rows) {
    s << r.tail_len << ',' << r.seeds << ',' << r.unique_sequences << ','
      << r.unique_first_tokens << ',' << fixed(r.mean_distinct_2, 6) << '\n';
  }
  return s.str();
}

nlohmann::json sweep_json(std::span<const SweepRow> rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"k", r.tail_len},
                   {"seeds", r.seeds},
                   {"unique_sequences", r.unique_sequences},
                   {"unique_first_tokens", r.unique_first_tokens},
                   {"mean_distinct_2", r.mean_distinct_2}});
  }
  return out;
}

std::string sweep_text(std::span<const SweepRow> rows) {
  std::vector<std::vector<std::string>> cells{
      {"k", "seeds", "unique_seq", "unique_first", "distinct-2"}};
  for (const auto& r : rows) {
    cells.push_back({std::to_string(r.tail_len), std::to_string(r.seeds),
                     std::to_string(r.unique_sequences), std::to_string(r.unique_first_tokens),
                     fixed(r.mean_distinct_2)});
  }
  return align(cells);
}

namespace {

std::vector<std::vector<TokenId>> nearest_neighbors(const Matrix& m, std::size_t k) {
  const std::size_t V = m.rows();
  Vector norms(V);
  for (std::size_t i = 0; i < V; ++i) norms[i] = std::max(norm(m.row(i)), 1e-300);
  const std::size_t take = std::min(k, V - 1);
  std::vector<std::vector<TokenId>> out(V);
  std::vector<std::pair<Scalar, TokenId>> sims;
  for (std::size_t i = 0; i < V; ++i) {
    sims.clear();
    for (std::size_t j = 0; j < V; ++j) {
      if (j == i) continue;
      sims.emplace_back(-dot(m.row(i), m.row(j)) / (norms[i] * norms[j]),
                        static_cast<TokenId>(j));
    }
    std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(take), sims.end());
    for (std::size_t t = 0; t < take; ++t) out[i].push_back(sims[t].second);
  }
  return out;
}

}  // namespace

DriftReport embedding_drift(const Matrix& initial, const Matrix& learned, std::size_t top_k,
                            std::size_t neighbors) {
  if (!initial.same_shape(learned)) {
    throw std::invalid_argument("embedding_drift: shapes " + shape_string(initial) + " and " +
                                shape_string(learned));
  }
  if (initial.rows() < 2) throw std::invalid_argument("embedding_drift: need at least 2 rows");
  DriftReport r;
  const std::size_t V = initial.rows();
  r.drift.resize(V);
  for (std::size_t i = 0; i < V; ++i) {
    r.drift[i] = std::sqrt(squared_distance(initial.row(i), learned.row(i)));
    r.mean_drift += r.drift[i] / static_cast<Scalar>(V);
  }
  std::vector<DriftEntry> all;
  for (std::size_t i = 0; i < V; ++i) all.push_back({static_cast<TokenId>(i), r.drift[i]});
  const std::size_t take = std::min(top_k, V);
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(),
                    [](const DriftEntry& a, const DriftEntry& b) {
                      return a.drift != b.drift ? a.drift > b.drift : a.id < b.id;
                    });
  r.top.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take));
  r.neighbors_before = nearest_neighbors(initial, neighbors);
  r.neighbors_after = nearest_neighbors(learned, neighbors);
  return r;
}

nlohmann::json to_json(const DriftReport& r) {
  nlohmann::json top = nlohmann::json::array();
  for (const auto& e : r.top) {
    top.push_back({{"id", e.id},
                   {"drift", e.drift},
                   {"neighbors_before", r.neighbors_before[static_cast<std::size_t>(e.id)]},
                   {"neighbors_after", r.neighbors_after[static_cast<std::size_t>(e.id)]}});
  }
  std::size_t changed = 0;
  for (std::size_t i = 0; i < r.neighbors_before.size(); ++i) {
    changed += r.neighbors_before[i] != r.neighbors_after[i] ? 1 : 0;
  }
  return {{"mean_drift", r.mean_drift},
          {"drift", r.drift},
          {"top", top},
          {"neighbor_lists_changed", changed},
          {"neighbors_before", r.neighbors_before},
          {"neighbors_after", r.neighbors_after}};
}

std::string to_text(const DriftReport& r) {
  auto join = [](const std::vector<TokenId>& ids) {
    std::string s;
    for (TokenId id : ids) s += (s.empty() ? "" : ",") + std::to_string(id);
    return s;
  };
  std::vector<std::vector<std::string>> rows{{"id", "drift", "before", "after"}};
  for (const auto& e : r.top) {
    const auto i = static_cast<std::size_t>(e.id);
    rows.push_back({std::to_string(e.id), fixed(e.drift, 6), join(r.neighbors_before[i]),
                    join(r.neighbors_after[i])});
  }
  return "mean drift " + fixed(r.mean_drift, 6) + "\n" + align(rows);
}

}  // namespace tokmat
