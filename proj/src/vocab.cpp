#include "vrpo/vocab.hpp"

#include <sstream>
#include <unordered_map>

#include "vrpo/common.hpp"

namespace vrpo::vocab {

namespace {

const std::vector<std::string>& table() {
  static const std::vector<std::string> t = {
      // specials
      "<pad>", "<unk>", "<eos>", "<think>", "</think>", "<answer>", "</answer>",
      // option letters
      "A", "B", "C", "D",
      // digits
      "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
      // concept codebook
      "red", "blue", "green", "cyan", "box", "star", "ring", "cube", "bird", "fish",
      "tree", "moon",
      // template words
      "which", "concept", "appears", "first", "how", "many", "frames", "contain",
      "options", "answer", "directly", "think", "briefly", "then", "step", "by",
      "carefully", "the", "video", "shows", "times", "I", "see", "so", "let", "me",
      "look", "at", "hmm", "wait", "is", ".", "?"};
  return t;
}

const std::unordered_map<std::string, int>& index() {
  static const std::unordered_map<std::string, int> idx = [] {
    std::unordered_map<std::string, int> m;
    const auto& t = table();
    for (int i = 0; i < static_cast<int>(t.size()); ++i) m[t[i]] = i;
    return m;
  }();
  return idx;
}

}  // namespace

int size() { return static_cast<int>(table().size()); }

int id(const std::string& word) {
  auto it = index().find(word);
  return it == index().end() ? unk_id() : it->second;
}

bool contains(const std::string& word) { return index().count(word) > 0; }

const std::string& word(int id_) {
  VRPO_CHECK(id_ >= 0 && id_ < size(), DimensionError, "vocab: id " << id_ << " out of range");
  return table()[static_cast<std::size_t>(id_)];
}

int pad_id() { return 0; }
int unk_id() { return 1; }
int eos_id() { return 2; }
int think_open_id() { return 3; }
int think_close_id() { return 4; }
int answer_open_id() { return 5; }
int answer_close_id() { return 6; }

int letter_id(char letter) {
  VRPO_CHECK(letter >= 'A' && letter <= 'D', ContractError, "letter_id: " << letter);
  return 7 + (letter - 'A');
}

int digit_id(int d) {
  VRPO_CHECK(d >= 0 && d <= 9, ContractError, "digit_id: " << d);
  return 11 + d;
}

std::span<const std::string> concepts() {
  static const int first = id("red");
  static const int count = 12;
  return {table().data() + first, static_cast<std::size_t>(count)};
}

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(id(w));
  return out;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

}  // namespace vrpo::vocab
