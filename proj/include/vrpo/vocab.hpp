#pragma once

// Closed synthetic vocabulary (~64 symbols) with a whitespace tokenizer.
// Covers the output brackets, option letters, digits, concept names and the
// template words used by prompts and pretraining targets.

#include <span>
#include <string>
#include <vector>

namespace vrpo::vocab {

int size();
int id(const std::string& word);       // <unk> id if absent
bool contains(const std::string& word);
const std::string& word(int id);

int pad_id();
int unk_id();
int eos_id();
int think_open_id();
int think_close_id();
int answer_open_id();
int answer_close_id();
int letter_id(char letter);            // 'A'..'D'
int digit_id(int d);                   // 0..9

std::span<const std::string> concepts();  // codebook concept names

std::vector<int> tokenize(const std::string& text);
std::string detokenize(std::span<const int> ids);

}  // namespace vrpo::vocab
