#pragma once

// Synthetic homophene benchmark. Phonemes map many-to-one onto visemes, so
// words whose phoneme strings differ only inside a viseme class look the same
// on the visual side.
//
// Visual token alphabet: [0, |V|) are plain viseme tokens; |V| + p is the
// phoneme-revealing sub-token of phoneme p (a viseme frame that carries a
// residual cue about which phoneme produced it). Audio tokens are phonemes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvm/io.hpp"

namespace mvm {

struct LexiconSpec {
  int phonemes = 10;
  int visemes = 4;
  int words = 20;
  int word_length = 4;
  int homophene_pairs = 5;
  double emission_separation = 0.2;  // epsilon: mean rate of revealing frames
  double noise_sigma = 0.1;          // sigma: mean rate of confusable frames
  std::uint64_t seed = 1;
};

struct Lexicon {
  int num_phonemes = 0;
  int num_visemes = 0;
  int word_length = 0;
  std::vector<int> phoneme_to_viseme;
  std::vector<std::vector<int>> words;  // phoneme strings
  std::vector<std::pair<int, int>> homophene_pairs;
  // Per word, per symbol position multiplier on epsilon and sigma (mean 1).
  std::vector<std::vector<double>> cue_profile;
  double emission_separation = 0.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  int num_words() const { return static_cast<int>(words.size()); }
  int visual_vocab() const { return num_visemes + num_phonemes; }
  int audio_vocab() const { return num_phonemes; }

  std::vector<int> viseme_string(int word) const {
    std::vector<int> out;
    for (int p : words.at(static_cast<std::size_t>(word))) out.push_back(phoneme_to_viseme[static_cast<std::size_t>(p)]);
    return out;
  }

  /// Phonemes sharing p's viseme, excluding p.
  std::vector<int> siblings(int p) const {
    std::vector<int> out;
    for (int q = 0; q < num_phonemes; ++q)
      if (q != p && phoneme_to_viseme[static_cast<std::size_t>(q)] == phoneme_to_viseme[static_cast<std::size_t>(p)])
        out.push_back(q);
    return out;
  }

  /// Words that belong to some declared homophene pair.
  std::vector<bool> homophene_mask() const {
    std::vector<bool> m(words.size(), false);
    for (auto [a, b] : homophene_pairs) m[static_cast<std::size_t>(a)] = m[static_cast<std::size_t>(b)] = true;
    return m;
  }

  bool operator==(const Lexicon&) const = default;
};

struct SyntheticExample {
  std::vector<int> viseme_tokens;
  std::vector<int> phoneme_tokens;
  int label = 0;

  bool operator==(const SyntheticExample&) const = default;
};

struct Dataset {
  Lexicon lexicon;
  int frames = 0;
  std::vector<SyntheticExample> examples;

  bool operator==(const Dataset&) const = default;
};

/// Groups words by viseme string; returns every unordered pair of words that
/// share one.
inline std::vector<std::pair<int, int>> find_homophenes(const Lexicon& lex) {
  std::map<std::vector<int>, std::vector<int>> groups;
  for (int w = 0; w < lex.num_words(); ++w) groups[lex.viseme_string(w)].push_back(w);
  std::vector<std::pair<int, int>> out;
  for (const auto& [_, ws] : groups)
    for (std::size_t i = 0; i < ws.size(); ++i)
      for (std::size_t j = i + 1; j < ws.size(); ++j) out.emplace_back(ws[i], ws[j]);
  std::sort(out.begin(), out.end());
  return out;
}

namespace detail {

inline double int_pow(double base, int e) {
  double r = 1.0;
  for (int i = 0; i < e; ++i) r *= base;
  return r;
}

}  // namespace detail

inline Lexicon build_lexicon(const LexiconSpec& spec) {
  const int P = spec.phonemes, V = spec.visemes, K = spec.words, L = spec.word_length;
  auto fail = [](const std::string& why) { throw std::invalid_argument("build_lexicon: " + why); };
  if (V < 2) fail("need at least 2 visemes");
  if (P <= V) fail("need more phonemes than visemes (got |P|=" + std::to_string(P) + ", |V|=" + std::to_string(V) + ")");
  if (K < 1 || L < 1) fail("need at least one word of length >= 1");
  if (spec.homophene_pairs < 0 || 2 * spec.homophene_pairs > K)
    fail(std::to_string(spec.homophene_pairs) + " pairs need " + std::to_string(2 * spec.homophene_pairs) +
         " words but K=" + std::to_string(K));
  if (static_cast<double>(K) > detail::int_pow(P, L))
    fail("more unique words (" + std::to_string(K) + ") than |P|^L phoneme strings");
  if (static_cast<double>(K - spec.homophene_pairs) > detail::int_pow(V, L))
    fail("K - pairs = " + std::to_string(K - spec.homophene_pairs) + " distinct viseme strings needed but only |V|^L = " +
         std::to_string(static_cast<long long>(detail::int_pow(V, L))) + " exist");
  if (spec.emission_separation < 0 || spec.noise_sigma < 0 || spec.emission_separation + spec.noise_sigma > 0.5)
    fail("epsilon and sigma must be non-negative with epsilon + sigma <= 0.5");

  std::mt19937_64 rng(spec.seed);
  Lexicon lex;
  lex.num_phonemes = P;
  lex.num_visemes = V;
  lex.word_length = L;
  lex.emission_separation = spec.emission_separation;
  lex.noise_sigma = spec.noise_sigma;
  lex.seed = spec.seed;

  // Surjective phoneme -> viseme map.
  std::vector<int> order(static_cast<std::size_t>(P));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  lex.phoneme_to_viseme.assign(static_cast<std::size_t>(P), 0);
  std::uniform_int_distribution<int> any_viseme(0, V - 1);
  for (int i = 0; i < P; ++i)
    lex.phoneme_to_viseme[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = i < V ? i : any_viseme(rng);

  std::vector<std::vector<int>> preimage(static_cast<std::size_t>(V));
  for (int p = 0; p < P; ++p) preimage[static_cast<std::size_t>(lex.phoneme_to_viseme[static_cast<std::size_t>(p)])].push_back(p);
  std::vector<int> ambiguous;
  for (int v = 0; v < V; ++v)
    if (preimage[static_cast<std::size_t>(v)].size() >= 2) ambiguous.push_back(v);

  auto pick = [&](const std::vector<int>& from) {
    std::uniform_int_distribution<std::size_t> d(0, from.size() - 1);
    return from[d(rng)];
  };

  std::set<std::vector<int>> used;
  auto fresh_viseme_string = [&](bool needs_ambiguous) {
    for (long attempt = 0; attempt < 10'000'000; ++attempt) {
      std::vector<int> s(static_cast<std::size_t>(L));
      for (auto& v : s) v = any_viseme(rng);
      if (needs_ambiguous) {
        std::uniform_int_distribution<int> pos(0, L - 1);
        s[static_cast<std::size_t>(pos(rng))] = pick(ambiguous);
      }
      if (used.insert(s).second) return s;
    }
    throw std::invalid_argument("build_lexicon: could not find an unused viseme string");
  };
  auto realize = [&](const std::vector<int>& vis) {
    std::vector<int> w;
    for (int v : vis) w.push_back(pick(preimage[static_cast<std::size_t>(v)]));
    return w;
  };

  std::vector<std::vector<int>> words;
  std::vector<std::pair<int, int>> pairs;
  for (int k = 0; k < spec.homophene_pairs; ++k) {
    const auto vis = fresh_viseme_string(true);
    auto a = realize(vis);
    std::vector<int> positions;
    for (int i = 0; i < L; ++i)
      if (preimage[static_cast<std::size_t>(vis[static_cast<std::size_t>(i)])].size() >= 2) positions.push_back(i);
    auto b = a;
    const auto at = static_cast<std::size_t>(pick(positions));
    b[at] = pick(lex.siblings(a[at]));
    pairs.emplace_back(static_cast<int>(words.size()), static_cast<int>(words.size()) + 1);
    words.push_back(std::move(a));
    words.push_back(std::move(b));
  }
  while (static_cast<int>(words.size()) < K) words.push_back(realize(fresh_viseme_string(false)));

  // Shuffle word indices so pair members are not adjacent.
  std::vector<int> perm(words.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> where(words.size());
  lex.words.resize(words.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    lex.words[i] = words[static_cast<std::size_t>(perm[i])];
    where[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  }
  for (auto [a, b] : pairs) {
    int x = where[static_cast<std::size_t>(a)], y = where[static_cast<std::size_t>(b)];
    lex.homophene_pairs.emplace_back(std::min(x, y), std::max(x, y));
  }
  std::sort(lex.homophene_pairs.begin(), lex.homophene_pairs.end());

  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (int w = 0; w < K; ++w) {
    std::vector<double> prof(static_cast<std::size_t>(L));
    for (auto& x : prof) x = u(rng);
    const double m = std::accumulate(prof.begin(), prof.end(), 0.0) / L;
    for (auto& x : prof) x /= m;
    lex.cue_profile.push_back(std::move(prof));
  }
  return lex;
}

/// Each word symbol spans T/L frames. Per visual frame at symbol position k:
/// with probability eps*profile[k] the phoneme-revealing sub-token replaces
/// the viseme token; otherwise with probability sigma*profile[k] a confusable
/// sub-token from the same viseme class does. Audio frames are replaced by a
/// uniformly random phoneme with probability sigma*profile[k].
template <class Rng>
SyntheticExample sample_example(const Lexicon& lex, int word, int frames, Rng& rng) {
  if (word < 0 || word >= lex.num_words()) throw std::invalid_argument("sample_example: word index out of range");
  if (frames <= 0 || frames % lex.word_length != 0)
    throw std::invalid_argument("sample_example: T=" + std::to_string(frames) + " is not divisible by L=" +
                                std::to_string(lex.word_length));
  const int per = frames / lex.word_length;
  const auto& phon = lex.words[static_cast<std::size_t>(word)];
  const auto& prof = lex.cue_profile[static_cast<std::size_t>(word)];
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> any_phoneme(0, lex.num_phonemes - 1);
  SyntheticExample ex;
  ex.label = word;
  ex.viseme_tokens.reserve(static_cast<std::size_t>(frames));
  ex.phoneme_tokens.reserve(static_cast<std::size_t>(frames));
  for (int t = 0; t < frames; ++t) {
    const auto k = static_cast<std::size_t>(t / per);
    const int p = phon[k];
    const double eps = lex.emission_separation * prof[k];
    const double sig = lex.noise_sigma * prof[k];
    const double r = u(rng);
    int vis = lex.phoneme_to_viseme[static_cast<std::size_t>(p)];
    if (r < eps) {
      vis = lex.num_visemes + p;
    } else if (r < eps + sig) {
      // A confusable drawn from the whole viseme class, p included, so it
      // looks the same for every word sharing this viseme.
      auto cls = lex.siblings(p);
      cls.push_back(p);
      std::uniform_int_distribution<std::size_t> d(0, cls.size() - 1);
      vis = lex.num_visemes + cls[d(rng)];
    }
    ex.viseme_tokens.push_back(vis);
    ex.phoneme_tokens.push_back(u(rng) < sig ? any_phoneme(rng) : p);
  }
  return ex;
}

/// `per_word` examples of every word, word-major, each word drawn from its own
/// derived stream so splits are stable under changes to K.
inline std::vector<SyntheticExample> sample_split(const Lexicon& lex, int frames, int per_word, std::uint64_t seed) {
  std::vector<SyntheticExample> out;
  out.reserve(static_cast<std::size_t>(per_word * lex.num_words()));
  for (int w = 0; w < lex.num_words(); ++w) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(w)};
    std::mt19937_64 rng(seq);
    for (int i = 0; i < per_word; ++i) out.push_back(sample_example(lex, w, frames, rng));
  }
  return out;
}

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

inline nlohmann::json dataset_header_json(const Lexicon& lex, int frames, std::size_t records) {
  return {{"magic", "MVMD"},
          {"format_version", kDatasetFormatVersion},
          {"phonemes", lex.num_phonemes},
          {"visemes", lex.num_visemes},
          {"words", lex.num_words()},
          {"word_length", lex.word_length},
          {"frames", frames},
          {"emission_separation", lex.emission_separation},
          {"noise_sigma", lex.noise_sigma},
          {"seed", lex.seed},
          {"records", records},
          {"homophene_pairs", lex.homophene_pairs}};
}

inline std::vector<std::uint8_t> encode_dataset(const Lexicon& lex, int frames,
                                                const std::vector<SyntheticExample>& examples) {
  ByteWriter w;
  w.bytes("MVMD");
  w.u32(kDatasetFormatVersion);
  w.u32(static_cast<std::uint32_t>(lex.num_phonemes));
  w.u32(static_cast<std::uint32_t>(lex.num_visemes));
  w.u32(static_cast<std::uint32_t>(lex.num_words()));
  w.u32(static_cast<std::uint32_t>(lex.word_length));
  w.u32(static_cast<std::uint32_t>(frames));
  w.f64(lex.emission_separation);
  w.f64(lex.noise_sigma);
  w.u64(lex.seed);
  for (int v : lex.phoneme_to_viseme) w.u32(static_cast<std::uint32_t>(v));
  for (const auto& word : lex.words)
    for (int p : word) w.u32(static_cast<std::uint32_t>(p));
  w.u32(static_cast<std::uint32_t>(lex.homophene_pairs.size()));
  for (auto [a, b] : lex.homophene_pairs) {
    w.u32(static_cast<std::uint32_t>(a));
    w.u32(static_cast<std::uint32_t>(b));
  }
  for (const auto& prof : lex.cue_profile)
    for (double x : prof) w.f64(x);
  w.u64(examples.size());
  for (const auto& ex : examples) {
    if (ex.viseme_tokens.size() != ex.phoneme_tokens.size())
      throw std::invalid_argument("write_dataset: modalities differ in length");
    w.u32(static_cast<std::uint32_t>(ex.viseme_tokens.size()));
    for (int t : ex.viseme_tokens) w.u16(static_cast<std::uint16_t>(t));
    for (int t : ex.phoneme_tokens) w.u16(static_cast<std::uint16_t>(t));
    w.u32(static_cast<std::uint32_t>(ex.label));
  }
  w.seal();
  return w.buffer();
}

inline Dataset decode_dataset(ByteReader r) {
  r.verify_seal();
  r.expect_magic("MVMD");
  const auto version = r.u32();
  if (version != kDatasetFormatVersion)
    throw FormatError(r.context() + ": unsupported dataset format version " + std::to_string(version));
  Dataset ds;
  auto& lex = ds.lexicon;
  lex.num_phonemes = static_cast<int>(r.u32());
  lex.num_visemes = static_cast<int>(r.u32());
  const auto K = r.u32();
  lex.word_length = static_cast<int>(r.u32());
  ds.frames = static_cast<int>(r.u32());
  lex.emission_separation = r.f64();
  lex.noise_sigma = r.f64();
  lex.seed = r.u64();
  for (int p = 0; p < lex.num_phonemes; ++p) lex.phoneme_to_viseme.push_back(static_cast<int>(r.u32()));
  lex.words.assign(K, std::vector<int>(static_cast<std::size_t>(lex.word_length)));
  for (auto& word : lex.words)
    for (auto& p : word) p = static_cast<int>(r.u32());
  const auto pairs = r.u32();
  for (std::uint32_t i = 0; i < pairs; ++i) {
    const int a = static_cast<int>(r.u32());
    const int b = static_cast<int>(r.u32());
    lex.homophene_pairs.emplace_back(a, b);
  }
  lex.cue_profile.assign(K, std::vector<double>(static_cast<std::size_t>(lex.word_length)));
  for (auto& prof : lex.cue_profile)
    for (auto& x : prof) x = r.f64();
  const auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    SyntheticExample ex;
    const auto len = r.u32();
    ex.viseme_tokens.resize(len);
    ex.phoneme_tokens.resize(len);
    for (auto& t : ex.viseme_tokens) t = r.u16();
    for (auto& t : ex.phoneme_tokens) t = r.u16();
    ex.label = static_cast<int>(r.u32());
    if (ex.label < 0 || ex.label >= static_cast<int>(K)) throw FormatError(r.context() + ": label out of range");
    ds.examples.push_back(std::move(ex));
  }
  r.expect_end();
  return ds;
}

/// Writes the binary dataset and a JSON sidecar (<path>.json) mirroring the
/// header.
inline void write_dataset(const std::filesystem::path& path, const Lexicon& lex, int frames,
                          const std::vector<SyntheticExample>& examples) {
  const auto bytes = encode_dataset(lex, frames, examples);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
  std::ofstream side(path.string() + ".json", std::ios::trunc);
  if (!side) throw FormatError("cannot open " + path.string() + ".json for writing");
  side << dataset_header_json(lex, frames, examples.size()).dump(2) << '\n';
}

inline Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(ByteReader::load(path)); }

}  // namespace mvm
