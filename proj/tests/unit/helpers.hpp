#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>

#include "intrus/model.hpp"

namespace testing {

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(std::filesystem::temp_directory_path() /
              ("intrus-" + tag + "-" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline intrus::ModelConfig tiny_config(int vocab_size, int max_len = 8) {
  intrus::ModelConfig c;
  c.vocab_size = vocab_size;
  c.model_dim = 8;
  c.num_heads = 2;
  c.num_encoder_layers = 2;
  c.num_decoder_layers = 2;
  c.ffn_dim = 16;
  c.max_len = max_len;
  return c;
}

}  // namespace testing
