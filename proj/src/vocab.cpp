#include "intrus/vocab.hpp"

#include <fstream>
#include <stdexcept>

namespace intrus {

std::vector<std::string_view> split_whitespace(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != '\r') ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

Vocab::Vocab() {
  add("<pad>", "reserved");
  add("<bos>", "reserved");
  add("<slot>", "reserved");
  add("<stop>", "reserved");
}

Token Vocab::add(std::string token, std::string token_class) {
  if (token.empty() || token.find_first_of(" \t\n\r") != std::string::npos) {
    throw VocabError("token must be non-empty and whitespace-free: '" + token + "'");
  }
  if (index_.contains(token)) throw VocabError("duplicate token: " + token);
  const Token id = static_cast<Token>(tokens_.size());
  index_.emplace(token, id);
  tokens_.push_back(std::move(token));
  classes_.push_back(std::move(token_class));
  return id;
}

std::optional<Token> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Token Vocab::id(std::string_view token) const {
  if (auto t = find(token)) return *t;
  throw VocabError("unknown token: '" + std::string(token) + "'");
}

const std::string& Vocab::token(Token id) const {
  if (id < 0 || id >= size()) throw VocabError("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

const std::string& Vocab::token_class(Token id) const {
  if (id < 0 || id >= size()) throw VocabError("token id out of range: " + std::to_string(id));
  return classes_[static_cast<std::size_t>(id)];
}

std::string Vocab::join(const TokenSeq& seq) const {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += token(seq[i]);
  }
  return out;
}

TokenSeq Vocab::parse(std::string_view text) const {
  TokenSeq out;
  for (std::string_view w : split_whitespace(text)) {
    const Token t = id(w);
    if (is_reserved(t)) throw VocabError("reserved token in data: '" + std::string(w) + "'");
    out.push_back(t);
  }
  return out;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocab: " + path);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    out << tokens_[i] << '\t' << classes_[i] << '\n';
  }
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocab: " + path);
  Vocab v;
  v.tokens_.clear();
  v.classes_.clear();
  v.index_.clear();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    std::string tok = line.substr(0, tab);
    std::string cls = tab == std::string::npos ? "content" : line.substr(tab + 1);
    try {
      v.add(std::move(tok), std::move(cls));
    } catch (const VocabError& e) {
      throw VocabError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  const char* expected[] = {"<pad>", "<bos>", "<slot>", "<stop>"};
  for (Token r = 0; r < reserved::kCount; ++r) {
    if (r >= v.size() || v.tokens_[static_cast<std::size_t>(r)] != expected[r]) {
      throw VocabError(path + ": reserved tokens must occupy the first four lines");
    }
  }
  return v;
}

}  // namespace intrus
