#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace medtrace {

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

// Ordered token list with dense ids. Text is split on whitespace and each
// chunk is consumed by greedy longest-prefix matching, so "7?" becomes the
// two tokens "7" and "?".
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  TokenId id(std::string_view token) const;
  std::optional<TokenId> find(std::string_view token) const;
  bool contains(std::string_view token) const { return find(token).has_value(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenSequence tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> ids) const;

  // Named token groups (numbers, numeral words, objects, ...). Not persisted
  // in the vocabulary file; builders re-declare them.
  void define_subset(const std::string& name, std::vector<TokenId> ids);
  const std::vector<TokenId>& subset(const std::string& name) const;
  bool has_subset(const std::string& name) const { return subsets_.contains(name); }

  // UTF-8, one token per line, line number = id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::map<std::string, std::vector<TokenId>> subsets_;
  std::size_t max_token_length_ = 0;
};

}  // namespace medtrace
