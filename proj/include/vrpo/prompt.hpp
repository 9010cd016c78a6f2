#pragma once

// Prompt templates for the three decoding modes and the target templates
// used by the pretraining corpus.

#include <string>
#include <vector>

#include "vrpo/model.hpp"
#include "vrpo/tasks.hpp"

namespace vrpo {

struct ModeTemplate {
  Mode mode = Mode::kConcise;
  std::string instruction;  // appended after the question/options block
  DecodeBudget budget;

  static ModeTemplate for_mode(Mode m, float temperature = 0.0f);
};

// "{question} options A {o1} B {o2} C {o3} D {o4} . {instruction} ."
std::vector<int> prompt_text_ids(const SynthVideoSample& sample, Mode mode);

PromptInputs build_prompt(const SynthVideoSample& sample, Mode mode);

// Target token ids (ending in <eos>) for pretraining pairs.
std::vector<int> direct_target_ids(char gold);
std::vector<int> concise_target_ids(const SynthVideoSample& sample);
std::vector<int> cot_target_ids(const SynthVideoSample& sample);

}  // namespace vrpo
