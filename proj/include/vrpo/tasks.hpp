#pragma once

// Deterministic synthetic "video" QA generator. Frames are concept
// prototypes plus Gaussian noise; families stress different evidence
// patterns (broad presence, temporal order, counting, single key frame).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vrpo/types.hpp"

namespace vrpo {

enum class Family { kIdentify, kOrder, kCount, kKeyframe };

const char* family_name(Family f);
Family family_from_name(const std::string& s);

struct SynthVideoSample {
  std::vector<VecX> frames;
  int n_frames = 0;
  Family family = Family::kIdentify;
  std::string question;           // whitespace-tokenizable question text
  std::string question_concept;   // concept the question refers to (count family)
  std::array<std::string, 4> options;
  char gold = 'A';
  float rho_dup = 0.0f;
  std::uint64_t seed = 0;
};

struct DatasetSpec {
  int count_identify = 0;
  int count_order = 0;
  int count_count = 0;
  int count_keyframe = 0;
  int n_frames = 16;
  float rho_dup = 0.25f;
  int codebook_size = 12;
  float noise_sigma = 0.1f;
  int visual_dim = 16;

  int total() const { return count_identify + count_order + count_count + count_keyframe; }
  void validate() const;
  static DatasetSpec mixed(int per_family, int n_frames);
};

// Orthonormal concept prototypes, fixed across runs (derived from an
// internal seed, not the dataset seed). Row c is the prototype of
// vocab::concepts()[c].
const MatRM& concept_codebook(int codebook_size, int visual_dim);

std::vector<SynthVideoSample> generate_dataset(const DatasetSpec& spec, std::uint64_t seed);

// Uniform-stride frame selection: indices floor(i*n/budget).
SynthVideoSample subsample_frames(const SynthVideoSample& sample, int budget_frames);

// Non-model solver reading full frames; the answerability oracle.
char oracle_solve(const SynthVideoSample& sample, const DatasetSpec& spec);
// Nearest-prototype decode of one frame.
int decode_frame_concept(const VecX& frame, const MatRM& codebook);

// ---- pretraining corpus -------------------------------------------------

struct PretrainPair {
  std::vector<VecX> frames;
  std::vector<int> prompt_ids;
  std::vector<int> target_ids;  // ends with <eos>
  Mode mode = Mode::kDirect;
  char gold = 'A';
};

struct CorpusOptions {
  float concise_fraction = 0.12f;  // fraction of samples that also get a concise pair
  float cot_fraction = 0.10f;      // fraction that also get a cot-style pair
  int budget_frames = 0;           // 0 = keep all frames
};

// Direct-answer pairs for every sample plus templated short think-span pairs
// for a fraction; think spans never exceed the concise decode budget and
// contain no multi-step reasoning chains.
std::vector<PretrainPair> build_pretrain_corpus(const std::vector<SynthVideoSample>& dataset,
                                                const CorpusOptions& options,
                                                std::uint64_t seed);

// ---- serialization --------------------------------------------------------

// JSON-lines: one header record (schema version + spec echo), then one
// record per sample, floats in base-10 text.
void save_dataset(const std::string& path, const DatasetSpec& spec,
                  const std::vector<SynthVideoSample>& samples);
std::pair<DatasetSpec, std::vector<SynthVideoSample>> load_dataset(const std::string& path);

}  // namespace vrpo
