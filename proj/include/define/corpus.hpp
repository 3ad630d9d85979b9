#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "define/detail/common.hpp"

// Word-level corpus handling: whitespace tokenization with one <eos> per
// line, a frequency-cut vocabulary and contiguous BPTT batch windows.

namespace define {

namespace detail {

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '\f' || c == '\v';
}

// Calls fn(token_view) for every word and fn("\n") at each line end. A
// trailing newline does not open a final empty line.
template <typename Fn>
void for_each_token(std::string_view text, Fn&& fn) {
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    const bool last = nl == std::string_view::npos;
    std::string_view line = text.substr(pos, last ? text.size() - pos : nl - pos);
    if (!last || !line.empty()) {
      std::size_t i = 0;
      while (i < line.size()) {
        while (i < line.size() && is_space(line[i])) ++i;
        std::size_t start = i;
        while (i < line.size() && !is_space(line[i])) ++i;
        if (i > start) fn(line.substr(start, i - start));
      }
      fn(std::string_view("\n"));
    }
    if (last) break;
    pos = nl + 1;
  }
}

}  // namespace detail

class Vocab {
 public:
  static constexpr std::int32_t unk_id = 0;
  static constexpr std::int32_t eos_id = 1;

  // Tokens seen fewer than min_count times map to <unk>. Ties in frequency
  // are broken lexicographically so ids are deterministic.
  static Vocab build(const std::string& text, std::uint64_t min_count = 1) {
    if (text.empty()) throw std::invalid_argument("Vocab: empty input text");
    std::unordered_map<std::string, std::uint64_t> counts;
    std::uint64_t lines = 0;
    detail::for_each_token(text, [&](std::string_view tok) {
      if (tok == "\n") ++lines;
      else ++counts[std::string(tok)];
    });

    std::vector<std::pair<std::string, std::uint64_t>> kept;
    std::uint64_t dropped = 0;
    for (auto& [tok, c] : counts) {
      if (c >= min_count) kept.emplace_back(tok, c);
      else dropped += c;
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });

    Vocab v;
    v.id_to_token_ = {"<unk>", "<eos>"};
    v.frequencies_ = {dropped, lines};
    for (auto& [tok, c] : kept) {
      v.token_to_id_[tok] = static_cast<std::int32_t>(v.id_to_token_.size());
      v.id_to_token_.push_back(tok);
      v.frequencies_.push_back(c);
    }
    return v;
  }

  std::size_t size() const { return id_to_token_.size(); }

  std::int32_t lookup(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    return it == token_to_id_.end() ? unk_id : it->second;
  }

  const std::string& token(std::size_t id) const { return id_to_token_.at(id); }
  std::uint64_t frequency(std::size_t id) const { return frequencies_.at(id); }

  std::vector<std::int32_t> encode(const std::string& text) const {
    std::vector<std::int32_t> ids;
    detail::for_each_token(text, [&](std::string_view tok) {
      ids.push_back(tok == "\n" ? eos_id : lookup(tok));
    });
    return ids;
  }

  // One "token<TAB>id<TAB>freq" line per entry, id order.
  std::string dump() const {
    std::string out;
    for (std::size_t id = 0; id < size(); ++id)
      out += detail::str(id_to_token_[id], '\t', id, '\t', frequencies_[id], '\n');
    return out;
  }

  static Vocab parse_dump(const std::string& text) {
    Vocab v;
    std::size_t pos = 0, lineno = 0;
    while (pos < text.size()) {
      std::size_t nl = text.find('\n', pos);
      if (nl == std::string::npos) nl = text.size();
      std::string_view line(text.data() + pos, nl - pos);
      const std::size_t t1 = line.find('\t');
      const std::size_t t2 = t1 == std::string_view::npos
                                 ? std::string_view::npos
                                 : line.find('\t', t1 + 1);
      if (t2 == std::string_view::npos)
        throw std::runtime_error(detail::str(
            "vocab dump: malformed line ", lineno, ": \"", std::string(line), "\""));
      std::string tok(line.substr(0, t1));
      const std::size_t id = std::stoull(std::string(line.substr(t1 + 1, t2 - t1 - 1)));
      const std::uint64_t freq = std::stoull(std::string(line.substr(t2 + 1)));
      if (id != v.id_to_token_.size())
        throw std::runtime_error(detail::str(
            "vocab dump: line ", lineno, " has id ", id, ", expected ",
            v.id_to_token_.size()));
      if (id >= 2) v.token_to_id_[tok] = static_cast<std::int32_t>(id);
      v.id_to_token_.push_back(std::move(tok));
      v.frequencies_.push_back(freq);
      pos = nl + 1;
      ++lineno;
    }
    if (v.id_to_token_.size() < 2)
      throw std::runtime_error("vocab dump: missing reserved entries");
    return v;
  }

 private:
  std::unordered_map<std::string, std::int32_t> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::vector<std::uint64_t> frequencies_;
};

// Splits the id sequence into batch_size parallel streams (remainder dropped)
// and yields windows of bptt_len inputs with next-token targets.
class BatchStream {
 public:
  struct Window {
    std::vector<std::int32_t> inputs;   // row-major [B x T]
    std::vector<std::int32_t> targets;  // inputs shifted by one within a stream
  };

  BatchStream(std::vector<std::int32_t> ids, std::size_t batch_size,
              std::size_t bptt_len)
      : ids_(std::move(ids)), batch_(batch_size), bptt_(bptt_len) {
    if (batch_ < 1 || bptt_ < 1)
      throw std::invalid_argument("BatchStream: batch size and BPTT length must be >= 1");
    const std::size_t needed = batch_ * (bptt_ + 1);
    if (ids_.size() < needed)
      throw std::invalid_argument(detail::str(
          "BatchStream: need at least batch*(bptt+1) = ", needed,
          " tokens, got ", ids_.size()));
    stream_len_ = ids_.size() / batch_;
  }

  std::size_t batch_size() const { return batch_; }
  std::size_t bptt_len() const { return bptt_; }
  std::size_t stream_len() const { return stream_len_; }
  std::size_t window_count() const { return (stream_len_ - 1) / bptt_; }
  std::size_t tokens_per_window() const { return batch_ * bptt_; }

  Window window(std::size_t w) const {
    if (w >= window_count())
      throw std::out_of_range(detail::str("BatchStream: window ", w, " of ",
                                          window_count()));
    Window out;
    out.inputs.resize(batch_ * bptt_);
    out.targets.resize(batch_ * bptt_);
    for (std::size_t b = 0; b < batch_; ++b) {
      const std::size_t base = b * stream_len_ + w * bptt_;
      for (std::size_t t = 0; t < bptt_; ++t) {
        out.inputs[b * bptt_ + t] = ids_[base + t];
        out.targets[b * bptt_ + t] = ids_[base + t + 1];
      }
    }
    return out;
  }

 private:
  std::vector<std::int32_t> ids_;
  std::size_t batch_;
  std::size_t bptt_;
  std::size_t stream_len_;
};

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace define
