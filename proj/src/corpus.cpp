#include "recursor/corpus.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "recursor/errors.hpp"

namespace recursor {

std::vector<int> encode_bytes(std::string_view text, bool bos, bool eos) {
  std::vector<int> out;
  out.reserve(text.size() + 2);
  if (bos) out.push_back(kBos);
  for (unsigned char c : text) out.push_back(c);
  if (eos) out.push_back(kEos);
  return out;
}

std::string decode_bytes(std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(kByteVocab))
      throw IndexError("decode_bytes: id " + std::to_string(id) + " outside the byte vocabulary");
    if (id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

std::string to_string(CorpusKind k) {
  switch (k) {
    case CorpusKind::Copy:
      return "copy";
    case CorpusKind::ModAdd:
      return "mod_add";
    case CorpusKind::CharLM:
      return "char_lm";
  }
  return "?";
}

CorpusKind corpus_kind_from_string(const std::string& s) {
  if (s == "copy") return CorpusKind::Copy;
  if (s == "mod_add") return CorpusKind::ModAdd;
  if (s == "char_lm") return CorpusKind::CharLM;
  throw ConfigError("data.kind: unknown corpus '" + s + "' (expected copy, mod_add or char_lm)");
}

void DataConfig::validate() const {
  if (seq_len < 4) throw ConfigError("data.seq_len: must be >= 4");
  if (batch < 1) throw ConfigError("data.batch: must be >= 1");
  if (alphabet < 1 || alphabet > 26) throw ConfigError("data.alphabet: must be in [1, 26]");
  if (modulus < 2) throw ConfigError("data.modulus: must be >= 2");
  if (kind == CorpusKind::CharLM && text_path.empty()) throw ConfigError("data.text_path: required for char_lm");
}

Corpus::Corpus(DataConfig config, std::uint64_t seed) : config_(std::move(config)), rng_(seed) {
  config_.validate();
  if (config_.kind == CorpusKind::CharLM) {
    std::filesystem::path p(config_.text_path);
    if (p.is_relative() && !config_.base_dir.empty()) p = std::filesystem::path(config_.base_dir) / p;
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError("data.text_path: cannot open '" + p.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    text_ = encode_bytes(ss.str(), false, false);
    if (text_.size() < config_.seq_len + 1)
      throw ConfigError("data.text_path: text shorter than seq_len + 1 bytes");
  }
}

std::vector<int> Corpus::sequence() {
  const std::size_t n = config_.seq_len + 1;
  std::vector<int> seq;
  seq.reserve(n);
  switch (config_.kind) {
    case CorpusKind::Copy: {
      const std::size_t m = (n - 3) / 2;
      std::vector<int> s(m);
      for (auto& c : s) c = 'a' + static_cast<int>(rng_.below(config_.alphabet));
      seq.push_back(kBos);
      seq.insert(seq.end(), s.begin(), s.end());
      seq.push_back('|');
      seq.insert(seq.end(), s.begin(), s.end());
      seq.push_back(kEos);
      seq.resize(n, kPad);
      break;
    }
    case CorpusKind::ModAdd: {
      seq.push_back(kBos);
      while (seq.size() < n) {
        const int a = static_cast<int>(rng_.below(config_.modulus));
        const int b = static_cast<int>(rng_.below(config_.modulus));
        const std::string rec = std::to_string(a) + "+" + std::to_string(b) + "=" +
                                std::to_string((a + b) % config_.modulus) + ";";
        for (unsigned char c : rec) seq.push_back(c);
      }
      seq.resize(n);
      break;
    }
    case CorpusKind::CharLM: {
      const std::size_t start = rng_.below(text_.size() - n + 1);
      seq.assign(text_.begin() + static_cast<std::ptrdiff_t>(start),
                 text_.begin() + static_cast<std::ptrdiff_t>(start + n));
      break;
    }
  }
  return seq;
}

Batch Corpus::next_batch() {
  Batch b;
  for (std::size_t i = 0; i < config_.batch; ++i) {
    auto s = sequence();
    b.inputs.emplace_back(s.begin(), s.end() - 1);
    b.targets.emplace_back(s.begin() + 1, s.end());
  }
  return b;
}

}  // namespace recursor
