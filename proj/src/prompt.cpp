#include "vrpo/prompt.hpp"

#include "vrpo/vocab.hpp"

namespace vrpo {

namespace {

const char* instruction_for(Mode mode) {
  switch (mode) {
    case Mode::kDirect: return "answer directly";
    case Mode::kConcise: return "think briefly then answer";
    case Mode::kCot: return "think step by step carefully then answer";
  }
  return "";
}

std::string concise_clause(const SynthVideoSample& sample) {
  const std::string gold_text = sample.options[static_cast<std::size_t>(sample.gold - 'A')];
  switch (sample.family) {
    case Family::kIdentify:
    case Family::kKeyframe: return "the video shows " + gold_text;
    case Family::kOrder: return gold_text + " appears first";
    case Family::kCount: return sample.question_concept + " appears " + gold_text + " times";
  }
  return gold_text;
}

}  // namespace

ModeTemplate ModeTemplate::for_mode(Mode m, float temperature) {
  ModeTemplate t;
  t.mode = m;
  t.instruction = instruction_for(m);
  t.budget = DecodeBudget::for_mode(m, temperature);
  return t;
}

std::vector<int> prompt_text_ids(const SynthVideoSample& sample, Mode mode) {
  std::string text = sample.question + " options";
  for (int i = 0; i < 4; ++i) {
    text += ' ';
    text += static_cast<char>('A' + i);
    text += ' ';
    text += sample.options[static_cast<std::size_t>(i)];
  }
  text += " . ";
  text += instruction_for(mode);
  text += " .";
  return vocab::tokenize(text);
}

PromptInputs build_prompt(const SynthVideoSample& sample, Mode mode) {
  PromptInputs p;
  p.frames = sample.frames;
  p.text_ids = prompt_text_ids(sample, mode);
  return p;
}

std::vector<int> direct_target_ids(char gold) {
  return {vocab::answer_open_id(), vocab::letter_id(gold), vocab::answer_close_id(),
          vocab::eos_id()};
}

std::vector<int> concise_target_ids(const SynthVideoSample& sample) {
  std::vector<int> ids = {vocab::think_open_id()};
  for (int t : vocab::tokenize(concise_clause(sample))) ids.push_back(t);
  ids.push_back(vocab::think_close_id());
  ids.push_back(vocab::answer_open_id());
  ids.push_back(vocab::letter_id(sample.gold));
  ids.push_back(vocab::answer_close_id());
  ids.push_back(vocab::eos_id());
  return ids;
}

std::vector<int> cot_target_ids(const SynthVideoSample& sample) {
  // Pondering-style filler around the same one-clause observation; long in
  // tokens, never a multi-step reasoning chain.
  std::string span = "hmm let me think step by step . I look at the video frames carefully "
                     ". wait . ";
  span += concise_clause(sample);
  span += " . so the answer is ";
  span += sample.gold;
  std::vector<int> ids = {vocab::think_open_id()};
  for (int t : vocab::tokenize(span)) ids.push_back(t);
  ids.push_back(vocab::think_close_id());
  ids.push_back(vocab::answer_open_id());
  ids.push_back(vocab::letter_id(sample.gold));
  ids.push_back(vocab::answer_close_id());
  ids.push_back(vocab::eos_id());
  return ids;
}

std::vector<PretrainPair> build_pretrain_corpus(const std::vector<SynthVideoSample>& dataset,
                                                const CorpusOptions& options,
                                                std::uint64_t seed) {
  VRPO_CHECK(!dataset.empty(), ContractError, "pretrain corpus: empty dataset");
  std::vector<PretrainPair> out;
  out.reserve(dataset.size() * 2);
  std::uint64_t idx = 0;
  for (const SynthVideoSample& base : dataset) {
    Rng rng(derive_seed(seed, 0xC0, idx++));
    std::uniform_real_distribution<float> uni(0.0f, 1.0f);
    const SynthVideoSample sample =
        (options.budget_frames > 0 && options.budget_frames < base.n_frames)
            ? subsample_frames(base, options.budget_frames)
            : base;

    PretrainPair direct;
    direct.frames = sample.frames;
    direct.prompt_ids = prompt_text_ids(sample, Mode::kDirect);
    direct.target_ids = direct_target_ids(sample.gold);
    direct.mode = Mode::kDirect;
    direct.gold = sample.gold;
    out.push_back(std::move(direct));

    if (uni(rng) < options.concise_fraction) {
      PretrainPair concise;
      concise.frames = sample.frames;
      concise.prompt_ids = prompt_text_ids(sample, Mode::kConcise);
      concise.target_ids = concise_target_ids(sample);
      concise.mode = Mode::kConcise;
      concise.gold = sample.gold;
      out.push_back(std::move(concise));
    }
    if (uni(rng) < options.cot_fraction) {
      PretrainPair cot;
      cot.frames = sample.frames;
      cot.prompt_ids = prompt_text_ids(sample, Mode::kCot);
      cot.target_ids = cot_target_ids(sample);
      cot.mode = Mode::kCot;
      cot.gold = sample.gold;
      out.push_back(std::move(cot));
    }
  }
  return out;
}

}  // namespace vrpo
