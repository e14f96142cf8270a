#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace intrus {

using Token = int;
using TokenSeq = std::vector<Token>;

// Reserved ids occupy the first slots of every vocabulary.
namespace reserved {
inline constexpr Token kPad = 0;
inline constexpr Token kBos = 1;   // encoder sentinel for empty sources; baseline decoder start
inline constexpr Token kSlot = 2;  // trailing end-slot sentinel of the insertion decoder
inline constexpr Token kStop = 3;  // realizes the terminating event
inline constexpr Token kCount = 4;
}  // namespace reserved

struct VocabError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// id <-> string table with a class label per token (used by order analysis).
class Vocab {
 public:
  Vocab();

  Token add(std::string token, std::string token_class = "content");

  Token id(std::string_view token) const;  // throws VocabError naming the token
  std::optional<Token> find(std::string_view token) const;
  const std::string& token(Token id) const;
  const std::string& token_class(Token id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  static bool is_reserved(Token id) { return id >= 0 && id < reserved::kCount; }

  std::string join(const TokenSeq& seq) const;
  // Whitespace-separated tokens; reserved tokens are rejected.
  TokenSeq parse(std::string_view text) const;

  // One token per line, id = line number, optional TAB + class label.
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::vector<std::string> classes_;
  std::unordered_map<std::string, Token> index_;
};

std::vector<std::string_view> split_whitespace(std::string_view text);

}  // namespace intrus
