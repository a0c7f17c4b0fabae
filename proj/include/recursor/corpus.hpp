#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "recursor/rng.hpp"

namespace recursor {

// Byte-level vocabulary: the 256 byte values then three specials.
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr std::size_t kByteVocab = 259;

std::vector<int> encode_bytes(std::string_view text, bool bos = true, bool eos = false);
// Specials are dropped; IndexError on ids outside the vocabulary.
std::string decode_bytes(std::span<const int> ids);

enum class CorpusKind { Copy, ModAdd, CharLM };

std::string to_string(CorpusKind k);
CorpusKind corpus_kind_from_string(const std::string& s);

struct DataConfig {
  CorpusKind kind = CorpusKind::Copy;
  std::size_t seq_len = 32;
  std::size_t batch = 8;
  // Copy: symbols drawn from the first `alphabet` lowercase letters.
  int alphabet = 8;
  // ModAdd: operands and results in [0, modulus).
  int modulus = 13;
  // CharLM: text file; relative paths resolve against `base_dir`.
  std::string text_path;
  std::string base_dir;

  void validate() const;
};

struct Batch {
  std::vector<std::vector<int>> inputs;   // each seq_len long
  std::vector<std::vector<int>> targets;  // inputs shifted left by one
};

// Deterministic synthetic stream. Copy sequences are "BOS s | s EOS" padded
// with PAD; ModAdd concatenates "a+b=c;" records; CharLM takes random windows
// of the text.
class Corpus {
 public:
  Corpus(DataConfig config, std::uint64_t seed);

  // seq_len + 1 tokens.
  std::vector<int> sequence();
  Batch next_batch();
  const DataConfig& config() const { return config_; }
  const std::vector<int>& text() const { return text_; }

 private:
  DataConfig config_;
  Rng rng_;
  std::vector<int> text_;
};

}  // namespace recursor
