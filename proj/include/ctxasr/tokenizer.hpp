#pragma once

#include "ctxasr/param_store.hpp"

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace ctxasr {

// Character tokenizer: pad, bos, eos, then space, apostrophe, digits and ASCII
// letters. Anything else (including every non-ASCII byte) is dropped.
class CharTokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;

  CharTokenizer() {
    to_id_.fill(-1);
    for (char c : alphabet()) {
      to_id_[static_cast<unsigned char>(c)] = static_cast<int>(chars_.size()) + 3;
      chars_.push_back(c);
    }
  }

  static std::string_view alphabet() {
    return " '0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";
  }

  int vocab_size() const { return static_cast<int>(chars_.size()) + 3; }

  std::vector<int> tokenize(std::string_view text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) {
      const int id = to_id_[static_cast<unsigned char>(c)];
      if (id >= 0) ids.push_back(id);
    }
    return ids;
  }

  // Special tokens are skipped.
  std::string detokenize(std::span<const int> ids) const {
    std::string out;
    for (int id : ids)
      if (id >= 3 && id < vocab_size()) out.push_back(chars_[static_cast<std::size_t>(id - 3)]);
    return out;
  }

  std::string hash() const { return hex64(fnv1a("chars:" + std::string(alphabet()))); }

 private:
  std::array<int, 256> to_id_{};
  std::string chars_;
};

}  // namespace ctxasr
