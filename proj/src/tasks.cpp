#include "vrpo/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

#include "vrpo/vocab.hpp"

namespace vrpo {

using nlohmann::json;

const char* family_name(Family f) {
  switch (f) {
    case Family::kIdentify: return "identify";
    case Family::kOrder: return "order";
    case Family::kCount: return "count";
    case Family::kKeyframe: return "keyframe";
  }
  return "?";
}

Family family_from_name(const std::string& s) {
  if (s == "identify") return Family::kIdentify;
  if (s == "order") return Family::kOrder;
  if (s == "count") return Family::kCount;
  if (s == "keyframe") return Family::kKeyframe;
  throw ConfigError("unknown family '" + s + "'");
}

void DatasetSpec::validate() const {
  VRPO_CHECK(count_identify >= 0 && count_order >= 0 && count_count >= 0 &&
                 count_keyframe >= 0,
             ConfigError, "dataset spec: negative count");
  VRPO_CHECK(n_frames >= 4, ConfigError, "dataset spec: need at least 4 frames");
  VRPO_CHECK(rho_dup >= 0.0f && rho_dup < 1.0f, ConfigError, "dataset spec: rho_dup range");
  VRPO_CHECK(noise_sigma >= 0.0f, ConfigError, "dataset spec: negative noise");
  VRPO_CHECK(codebook_size >= 5, ConfigError,
             "dataset spec: codebook must exceed the four options");
  VRPO_CHECK(codebook_size <= visual_dim, ConfigError,
             "dataset spec: codebook larger than visual_dim (prototypes are orthonormal)");
  VRPO_CHECK(codebook_size <= static_cast<int>(vocab::concepts().size()), ConfigError,
             "dataset spec: codebook exceeds named concepts");
}

DatasetSpec DatasetSpec::mixed(int per_family, int n_frames_) {
  DatasetSpec s;
  s.count_identify = s.count_order = s.count_count = s.count_keyframe = per_family;
  s.n_frames = n_frames_;
  return s;
}

const MatRM& concept_codebook(int codebook_size, int visual_dim) {
  static std::map<std::pair<int, int>, MatRM> cache;
  auto key = std::make_pair(codebook_size, visual_dim);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  Rng rng(0xC0DEB00CULL);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  MatRM m(codebook_size, visual_dim);
  for (int i = 0; i < codebook_size; ++i) {
    for (int rep = 0; rep < 64; ++rep) {
      for (int j = 0; j < visual_dim; ++j) m(i, j) = dist(rng);
      // Gram-Schmidt against earlier prototypes
      for (int p = 0; p < i; ++p) m.row(i) -= m.row(i).dot(m.row(p)) * m.row(p);
      const float norm = m.row(i).norm();
      if (norm > 1e-3f) {
        m.row(i) /= norm;
        break;
      }
    }
  }
  return cache.emplace(key, std::move(m)).first->second;
}

namespace {

VecX make_frame(int concept_id, const MatRM& codebook, float sigma, Rng& rng) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  VecX f = codebook.row(concept_id).transpose();
  for (int i = 0; i < f.size(); ++i) f[i] += sigma * dist(rng);
  return f;
}

// k distinct values from [0, n) in ascending order
std::vector<int> sample_indices(int n, int k, Rng& rng) {
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
  }
  all.resize(static_cast<std::size_t>(k));
  std::sort(all.begin(), all.end());
  return all;
}

// Chooses `k` distinct concepts from [0, codebook_size) excluding `used`.
std::vector<int> pick_concepts(int codebook_size, int k, std::set<int> used, Rng& rng) {
  std::vector<int> pool;
  for (int c = 0; c < codebook_size; ++c)
    if (!used.count(c)) pool.push_back(c);
  VRPO_CHECK(static_cast<int>(pool.size()) >= k, ConfigError,
             "codebook too small for option/filler split");
  std::vector<int> out;
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(0, static_cast<int>(pool.size()) - 1);
    const int at = pick(rng);
    out.push_back(pool[static_cast<std::size_t>(at)]);
    pool.erase(pool.begin() + at);
  }
  return out;
}

struct FramePlan {
  std::vector<int> concepts;   // concept per frame
  std::vector<char> protect;   // frames that must not be duplicated over
};

const std::string& concept_name(int c) { return vocab::concepts()[static_cast<std::size_t>(c)]; }

void inject_duplicates(SynthVideoSample& sample, const FramePlan& plan, float rho_dup,
                       Rng& rng) {
  if (rho_dup <= 0.0f) return;
  const int n = sample.n_frames;
  std::vector<int> safe;
  for (int i = 0; i < n; ++i)
    if (!plan.protect[static_cast<std::size_t>(i)]) safe.push_back(i);
  int n_pairs = static_cast<int>(std::lround(rho_dup * static_cast<float>(n) / 2.0f));
  n_pairs = std::min<int>(n_pairs, static_cast<int>(safe.size()) / 2);
  std::shuffle(safe.begin(), safe.end(), rng);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (int p = 0; p < n_pairs; ++p) {
    const int src = safe[static_cast<std::size_t>(2 * p)];
    const int dst = safe[static_cast<std::size_t>(2 * p + 1)];
    VecX copy = sample.frames[static_cast<std::size_t>(src)];
    for (int i = 0; i < copy.size(); ++i) copy[i] += 0.02f * dist(rng);
    sample.frames[static_cast<std::size_t>(dst)] = copy;
  }
}

char place_gold(std::array<std::string, 4>& options, const std::string& gold_text,
                std::vector<std::string> distractors, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, 3);
  const int slot = pick(rng);
  int d = 0;
  for (int i = 0; i < 4; ++i) {
    if (i == slot)
      options[static_cast<std::size_t>(i)] = gold_text;
    else
      options[static_cast<std::size_t>(i)] = distractors[static_cast<std::size_t>(d++)];
  }
  return static_cast<char>('A' + slot);
}

SynthVideoSample generate_sample(const DatasetSpec& spec, Family family,
                                 std::uint64_t sample_seed) {
  Rng rng(sample_seed);
  const MatRM& codebook = concept_codebook(spec.codebook_size, spec.visual_dim);
  const int n = spec.n_frames;

  SynthVideoSample s;
  s.family = family;
  s.n_frames = n;
  s.rho_dup = spec.rho_dup;
  s.seed = sample_seed;

  FramePlan plan;
  plan.concepts.assign(static_cast<std::size_t>(n), -1);
  plan.protect.assign(static_cast<std::size_t>(n), 0);

  switch (family) {
    case Family::kIdentify: {
      auto opts = pick_concepts(spec.codebook_size, 4, {}, rng);
      const int gold_c = opts[0];
      auto fillers = pick_concepts(spec.codebook_size, 2,
                                   std::set<int>(opts.begin(), opts.end()), rng);
      // gold present broadly, fillers elsewhere
      std::uniform_int_distribution<int> coin(0, 99);
      int gold_frames = 0;
      for (int i = 0; i < n; ++i) {
        if (coin(rng) < 55) {
          plan.concepts[static_cast<std::size_t>(i)] = gold_c;
          ++gold_frames;
        } else {
          std::uniform_int_distribution<int> pickf(0, 1);
          plan.concepts[static_cast<std::size_t>(i)] = fillers[static_cast<std::size_t>(pickf(rng))];
        }
      }
      if (gold_frames == 0) {
        std::uniform_int_distribution<int> at(0, n - 1);
        const int i = at(rng);
        plan.concepts[static_cast<std::size_t>(i)] = gold_c;
      }
      for (int i = 0; i < n; ++i)
        plan.protect[static_cast<std::size_t>(i)] =
            plan.concepts[static_cast<std::size_t>(i)] == gold_c;
      s.question = "which concept appears ?";
      s.question_concept = concept_name(gold_c);
      std::vector<std::string> distractors = {concept_name(opts[1]), concept_name(opts[2]),
                                              concept_name(opts[3])};
      s.gold = place_gold(s.options, concept_name(gold_c), distractors, rng);
      break;
    }
    case Family::kOrder: {
      auto opts = pick_concepts(spec.codebook_size, 4, {}, rng);
      const int first_c = opts[0], second_c = opts[1];
      auto fillers = pick_concepts(spec.codebook_size, 2,
                                   std::set<int>(opts.begin(), opts.end()), rng);
      std::uniform_int_distribution<int> first_at(0, n / 3);
      const int i_first = first_at(rng);
      std::uniform_int_distribution<int> second_at(i_first + 1, n - 1);
      const int i_second = second_at(rng);
      for (int i = 0; i < n; ++i) {
        std::uniform_int_distribution<int> pickf(0, 1);
        plan.concepts[static_cast<std::size_t>(i)] = fillers[static_cast<std::size_t>(pickf(rng))];
      }
      plan.concepts[static_cast<std::size_t>(i_first)] = first_c;
      plan.concepts[static_cast<std::size_t>(i_second)] = second_c;
      plan.protect[static_cast<std::size_t>(i_first)] = 1;
      plan.protect[static_cast<std::size_t>(i_second)] = 1;
      s.question = "which concept appears first ?";
      s.question_concept = concept_name(first_c);
      std::vector<std::string> distractors = {concept_name(second_c), concept_name(opts[2]),
                                              concept_name(opts[3])};
      s.gold = place_gold(s.options, concept_name(first_c), distractors, rng);
      break;
    }
    case Family::kCount: {
      auto cs = pick_concepts(spec.codebook_size, 3, {}, rng);
      const int x = cs[0];
      const int k_max = std::min(6, n - 1);
      std::uniform_int_distribution<int> pick_k(2, k_max);
      const int k = pick_k(rng);
      auto where = sample_indices(n, k, rng);
      std::set<int> where_set(where.begin(), where.end());
      for (int i = 0; i < n; ++i) {
        if (where_set.count(i)) {
          plan.concepts[static_cast<std::size_t>(i)] = x;
          plan.protect[static_cast<std::size_t>(i)] = 1;
        } else {
          std::uniform_int_distribution<int> pickf(1, 2);
          plan.concepts[static_cast<std::size_t>(i)] = cs[static_cast<std::size_t>(pickf(rng))];
        }
      }
      s.question = "how many frames contain " + concept_name(x) + " ?";
      s.question_concept = concept_name(x);
      // distractor digit options around k
      std::set<int> digits = {k};
      std::uniform_int_distribution<int> jitter(1, 3);
      while (static_cast<int>(digits.size()) < 4) {
        int d = k + (jitter(rng)) * (digits.size() % 2 == 0 ? 1 : -1);
        d = std::max(0, std::min(9, d));
        if (digits.count(d)) {
          for (d = 0; d <= 9 && digits.count(d); ++d) {
          }
        }
        if (d <= 9) digits.insert(d);
      }
      std::vector<std::string> distractors;
      for (int d : digits)
        if (d != k) distractors.push_back(std::to_string(d));
      std::shuffle(distractors.begin(), distractors.end(), rng);
      s.gold = place_gold(s.options, std::to_string(k), distractors, rng);
      break;
    }
    case Family::kKeyframe: {
      auto opts = pick_concepts(spec.codebook_size, 4, {}, rng);
      const int gold_c = opts[0];
      auto fillers = pick_concepts(spec.codebook_size, 2,
                                   std::set<int>(opts.begin(), opts.end()), rng);
      std::uniform_int_distribution<int> key_at(0, n - 1);
      const int i_key = key_at(rng);
      for (int i = 0; i < n; ++i) {
        std::uniform_int_distribution<int> pickf(0, 1);
        plan.concepts[static_cast<std::size_t>(i)] = fillers[static_cast<std::size_t>(pickf(rng))];
      }
      plan.concepts[static_cast<std::size_t>(i_key)] = gold_c;
      plan.protect[static_cast<std::size_t>(i_key)] = 1;
      s.question = "which concept appears ?";
      s.question_concept = concept_name(gold_c);
      std::vector<std::string> distractors = {concept_name(opts[1]), concept_name(opts[2]),
                                              concept_name(opts[3])};
      s.gold = place_gold(s.options, concept_name(gold_c), distractors, rng);
      break;
    }
  }

  s.frames.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    s.frames.push_back(
        make_frame(plan.concepts[static_cast<std::size_t>(i)], codebook, spec.noise_sigma, rng));
  inject_duplicates(s, plan, spec.rho_dup, rng);
  return s;
}

}  // namespace

std::vector<SynthVideoSample> generate_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<SynthVideoSample> out;
  out.reserve(static_cast<std::size_t>(spec.total()));
  const std::array<std::pair<Family, int>, 4> plan = {
      std::make_pair(Family::kIdentify, spec.count_identify),
      std::make_pair(Family::kOrder, spec.count_order),
      std::make_pair(Family::kCount, spec.count_count),
      std::make_pair(Family::kKeyframe, spec.count_keyframe)};
  std::uint64_t idx = 0;
  for (const auto& [family, count] : plan)
    for (int i = 0; i < count; ++i)
      out.push_back(generate_sample(spec, family, derive_seed(seed, idx++)));
  return out;
}

SynthVideoSample subsample_frames(const SynthVideoSample& sample, int budget_frames) {
  VRPO_CHECK(budget_frames >= 1, ConfigError, "subsample: zero frame budget");
  VRPO_CHECK(budget_frames <= sample.n_frames, ConfigError,
             "subsample: budget " << budget_frames << " > n_frames " << sample.n_frames);
  if (budget_frames == sample.n_frames) return sample;
  SynthVideoSample out = sample;
  out.frames.clear();
  for (int i = 0; i < budget_frames; ++i) {
    const int src = static_cast<int>(static_cast<std::int64_t>(i) * sample.n_frames /
                                     budget_frames);
    out.frames.push_back(sample.frames[static_cast<std::size_t>(src)]);
  }
  out.n_frames = budget_frames;
  return out;
}

int decode_frame_concept(const VecX& frame, const MatRM& codebook) {
  Eigen::Index best;
  (codebook * frame).maxCoeff(&best);
  return static_cast<int>(best);
}

char oracle_solve(const SynthVideoSample& sample, const DatasetSpec& spec) {
  const MatRM& codebook = concept_codebook(spec.codebook_size, spec.visual_dim);
  std::vector<int> decoded;
  decoded.reserve(sample.frames.size());
  for (const VecX& f : sample.frames) decoded.push_back(decode_frame_concept(f, codebook));

  auto option_letter = [&](const std::string& text) -> char {
    for (int i = 0; i < 4; ++i)
      if (sample.options[static_cast<std::size_t>(i)] == text)
        return static_cast<char>('A' + i);
    return '?';
  };
  auto concept_index = [&](const std::string& name) -> int {
    auto all = vocab::concepts();
    for (int c = 0; c < static_cast<int>(all.size()); ++c)
      if (all[static_cast<std::size_t>(c)] == name) return c;
    return -1;
  };

  switch (sample.family) {
    case Family::kIdentify:
    case Family::kKeyframe: {
      for (int i = 0; i < 4; ++i) {
        const int c = concept_index(sample.options[static_cast<std::size_t>(i)]);
        if (c < 0) continue;
        if (std::find(decoded.begin(), decoded.end(), c) != decoded.end())
          return static_cast<char>('A' + i);
      }
      return '?';
    }
    case Family::kOrder: {
      int best_slot = -1, best_pos = 1 << 30;
      for (int i = 0; i < 4; ++i) {
        const int c = concept_index(sample.options[static_cast<std::size_t>(i)]);
        if (c < 0) continue;
        auto it = std::find(decoded.begin(), decoded.end(), c);
        if (it == decoded.end()) continue;
        const int pos = static_cast<int>(it - decoded.begin());
        if (pos < best_pos) {
          best_pos = pos;
          best_slot = i;
        }
      }
      return best_slot < 0 ? '?' : static_cast<char>('A' + best_slot);
    }
    case Family::kCount: {
      const int x = concept_index(sample.question_concept);
      const int k = static_cast<int>(std::count(decoded.begin(), decoded.end(), x));
      return option_letter(std::to_string(k));
    }
  }
  return '?';
}

void save_dataset(const std::string& path, const DatasetSpec& spec,
                  const std::vector<SynthVideoSample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  VRPO_CHECK(out.good(), IoError, "cannot open " << path << " for writing");
  json header = {{"schema_version", 1},
                 {"kind", "vrpo-dataset"},
                 {"spec",
                  {{"count_identify", spec.count_identify},
                   {"count_order", spec.count_order},
                   {"count_count", spec.count_count},
                   {"count_keyframe", spec.count_keyframe},
                   {"n_frames", spec.n_frames},
                   {"rho_dup", spec.rho_dup},
                   {"codebook_size", spec.codebook_size},
                   {"noise_sigma", spec.noise_sigma},
                   {"visual_dim", spec.visual_dim}}}};
  out << header.dump() << "\n";
  for (const SynthVideoSample& s : samples) {
    json frames = json::array();
    for (const VecX& f : s.frames) {
      json row = json::array();
      for (int i = 0; i < f.size(); ++i) row.push_back(f[i]);
      frames.push_back(std::move(row));
    }
    json rec = {{"seed", s.seed},
                {"family", family_name(s.family)},
                {"n_frames", s.n_frames},
                {"question", s.question},
                {"question_concept", s.question_concept},
                {"options", s.options},
                {"gold", std::string(1, s.gold)},
                {"rho_dup", s.rho_dup},
                {"frames", std::move(frames)}};
    out << rec.dump() << "\n";
  }
  VRPO_CHECK(out.good(), IoError, "write failed for " << path);
}

std::pair<DatasetSpec, std::vector<SynthVideoSample>> load_dataset(const std::string& path) {
  std::ifstream in(path);
  VRPO_CHECK(in.good(), IoError, "cannot open dataset " << path);
  std::string line;
  VRPO_CHECK(static_cast<bool>(std::getline(in, line)), IoError, "empty dataset " << path);
  json header = json::parse(line);
  VRPO_CHECK(header.value("kind", "") == "vrpo-dataset", CompatError,
             path << " is not a dataset file");
  VRPO_CHECK(header.value("schema_version", 0) == 1, CompatError,
             "unsupported dataset schema version");
  DatasetSpec spec;
  const json& js = header.at("spec");
  spec.count_identify = js.value("count_identify", 0);
  spec.count_order = js.value("count_order", 0);
  spec.count_count = js.value("count_count", 0);
  spec.count_keyframe = js.value("count_keyframe", 0);
  spec.n_frames = js.value("n_frames", 16);
  spec.rho_dup = js.value("rho_dup", 0.0f);
  spec.codebook_size = js.value("codebook_size", 12);
  spec.noise_sigma = js.value("noise_sigma", 0.1f);
  spec.visual_dim = js.value("visual_dim", 16);

  std::vector<SynthVideoSample> samples;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    SynthVideoSample s;
    s.seed = rec.at("seed").get<std::uint64_t>();
    s.family = family_from_name(rec.at("family").get<std::string>());
    s.n_frames = rec.at("n_frames").get<int>();
    s.question = rec.at("question").get<std::string>();
    s.question_concept = rec.value("question_concept", "");
    auto opts = rec.at("options").get<std::vector<std::string>>();
    VRPO_CHECK(opts.size() == 4, CompatError, "sample record lacks 4 options");
    std::copy(opts.begin(), opts.end(), s.options.begin());
    s.gold = rec.at("gold").get<std::string>().at(0);
    s.rho_dup = rec.value("rho_dup", 0.0f);
    for (const auto& row : rec.at("frames")) {
      VecX f(static_cast<Eigen::Index>(row.size()));
      for (Eigen::Index i = 0; i < f.size(); ++i)
        f[i] = row[static_cast<std::size_t>(i)].get<float>();
      s.frames.push_back(std::move(f));
    }
    VRPO_CHECK(static_cast<int>(s.frames.size()) == s.n_frames, CompatError,
               "frame count mismatch in record");
    samples.push_back(std::move(s));
  }
  return {spec, samples};
}

}  // namespace vrpo
