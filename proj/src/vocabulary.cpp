#include "medtrace/vocabulary.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "medtrace/error.hpp"

namespace medtrace {

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const std::string& t = tokens_[i];
    if (t.empty()) throw VocabularyError("empty token at id " + std::to_string(i));
    if (std::any_of(t.begin(), t.end(), [](unsigned char c) { return std::isspace(c); })) {
      throw VocabularyError("token contains whitespace: '" + t + "'");
    }
    if (!index_.emplace(t, static_cast<TokenId>(i)).second) {
      throw VocabularyError("duplicate token '" + t + "'");
    }
    max_token_length_ = std::max(max_token_length_, t.size());
  }
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw VocabularyError("token id out of range: " + std::to_string(id));
  return tokens_[id];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const {
  if (auto found = find(token)) return *found;
  throw VocabularyError("unknown token '" + std::string(token) + "'");
}

TokenSequence Vocabulary::tokenize(std::string_view text) const {
  TokenSequence out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    std::size_t end = pos;
    while (end < text.size() && !std::isspace(static_cast<unsigned char>(text[end]))) ++end;
    std::string_view chunk = text.substr(pos, end - pos);
    while (!chunk.empty()) {
      std::size_t len = std::min(chunk.size(), max_token_length_);
      std::optional<TokenId> hit;
      for (; len > 0; --len) {
        if ((hit = find(chunk.substr(0, len)))) break;
      }
      if (!hit) throw VocabularyError("unknown text fragment '" + std::string(chunk) + "'");
      out.push_back(*hit);
      chunk.remove_prefix(len);
    }
    pos = end;
  }
  if (out.empty()) throw VocabularyError("text produced an empty token sequence");
  return out;
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

void Vocabulary::define_subset(const std::string& name, std::vector<TokenId> ids) {
  for (TokenId id : ids) token(id);
  subsets_[name] = std::move(ids);
}

const std::vector<TokenId>& Vocabulary::subset(const std::string& name) const {
  auto it = subsets_.find(name);
  if (it == subsets_.end()) throw VocabularyError("no token subset named '" + name + "'");
  return it->second;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

}  // namespace medtrace
