#pragma once

// Mixed-modal prompts: context text, <bos>, audio tokens, transcript, <eos>.
// Loss is taken only on transcript and <eos> targets.

#include "ctxasr/bundle.hpp"

#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ctxasr {

enum class Source { context, bos, audio, transcript, eos };
enum class PromptMode { train, infer };

inline constexpr std::size_t kMaxContextTokens = 50;

template <typename S>
struct PromptSequence {
  std::vector<Source> sources;
  std::vector<int> labels;  // token id per position; -1 at audio positions
  std::vector<bool> loss_mask;
  std::size_t prefix_len = 0;
  Tensor<S> embeddings;    // [N, model_dim]
  Tensor<S> cross_source;  // encoder output when audio is attended through cross-attention

  std::size_t size() const { return sources.size(); }
  std::size_t count(Source s) const { return static_cast<std::size_t>(std::count(sources.begin(), sources.end(), s)); }
};

// Train: uniformly random contiguous window of max_len. Infer: keep the
// trailing max_len tokens.
inline std::vector<int> crop_context(const std::vector<int>& tokens, std::size_t max_len, PromptMode mode,
                                     Rng* rng = nullptr) {
  if (max_len < 1) throw std::invalid_argument("crop_context: max_len must be >= 1");
  if (tokens.size() <= max_len) return tokens;
  std::size_t start = tokens.size() - max_len;
  if (mode == PromptMode::train) {
    if (!rng) throw std::invalid_argument("crop_context: train mode needs an rng");
    start = std::uniform_int_distribution<std::size_t>(0, tokens.size() - max_len)(*rng);
  }
  return {tokens.begin() + static_cast<long>(start), tokens.begin() + static_cast<long>(start + max_len)};
}

// For the decoder-only variant audio tokens sit between <bos> and the
// transcript. For the encoder-decoder variant they are kept out of the
// sequence and handed to cross-attention instead.
template <typename S>
PromptSequence<S> assemble_prompt(const Decoder<S>& dec, const std::vector<int>* context, const Tensor<S>& audio,
                                  std::span<const int> transcript, PromptMode mode, Rng* rng = nullptr,
                                  std::size_t max_context = kMaxContextTokens) {
  if (!audio.defined() || audio.rank() != 2 || audio.dim(0) == 0)
    throw std::invalid_argument("assemble_prompt: audio embeddings are empty");
  if (mode == PromptMode::infer && !transcript.empty())
    throw std::invalid_argument("assemble_prompt: infer prompts carry no transcript");
  if (mode == PromptMode::train && transcript.empty())
    throw std::invalid_argument("assemble_prompt: train prompts need a transcript");
  const bool inline_audio = dec.cfg.variant == DecoderVariant::decoder_only;

  PromptSequence<S> p;
  std::vector<int> head;
  if (context) head = crop_context(*context, max_context, mode, rng);
  for (std::size_t i = 0; i < head.size(); ++i) p.sources.push_back(Source::context);
  head.push_back(CharTokenizer::kBos);
  p.sources.push_back(Source::bos);
  p.labels = head;
  std::vector<Tensor<S>> parts{dec.embed_tokens(head)};
  if (inline_audio) {
    parts.push_back(audio);
    p.sources.insert(p.sources.end(), audio.dim(0), Source::audio);
    p.labels.insert(p.labels.end(), audio.dim(0), -1);
  } else {
    p.cross_source = audio;
  }
  p.prefix_len = p.sources.size();
  if (mode == PromptMode::train) {
    std::vector<int> tail(transcript.begin(), transcript.end());
    tail.push_back(CharTokenizer::kEos);
    p.sources.insert(p.sources.end(), transcript.size(), Source::transcript);
    p.sources.push_back(Source::eos);
    p.labels.insert(p.labels.end(), tail.begin(), tail.end());
    parts.push_back(dec.embed_tokens(tail));
  }
  for (auto s : p.sources) p.loss_mask.push_back(s == Source::transcript || s == Source::eos);
  p.embeddings = parts.size() == 1 ? parts[0] : concat(parts, 0);
  return p;
}

// Mean next-token cross-entropy over positions whose following position is
// loss-masked. Only those rows go through the output head.
template <typename S>
Tensor<S> sequence_loss(const Decoder<S>& dec, const PromptSequence<S>& prompt, MaskKind mask,
                        const ForwardContext& ctx = {}) {
  std::vector<std::pair<std::size_t, std::size_t>> runs;  // [start, len) of predicting rows
  std::vector<int> targets;
  for (std::size_t i = 0; i + 1 < prompt.size(); ++i) {
    if (!prompt.loss_mask[i + 1]) continue;
    if (!runs.empty() && runs.back().first + runs.back().second == i)
      ++runs.back().second;
    else
      runs.emplace_back(i, 1);
    targets.push_back(prompt.labels[i + 1]);
  }
  if (targets.empty()) throw std::invalid_argument("sequence_loss: prompt has no loss-masked targets");
  const MaskScheme scheme{mask, prompt.prefix_len};
  const Tensor<S>* cross = prompt.cross_source.defined() ? &prompt.cross_source : nullptr;
  auto h = dec.hidden(prompt.embeddings, scheme, cross, ctx);
  std::vector<Tensor<S>> rows;
  for (auto [start, len] : runs) rows.push_back(slice(h, 0, start, len));
  auto sel = rows.size() == 1 ? rows[0] : concat(rows, 0);
  return cross_entropy(dec.logits(sel), targets);
}

template <typename S>
struct BoundModel {
  AudioEncoder<S> encoder;
  Decoder<S> decoder;
};

template <typename S>
BoundModel<S> bind_model(const ModelBundle<S>& b) {
  return {b.encoder(), b.decoder()};
}

inline constexpr std::size_t kMaxTranscriptTokens = 160;

// Greedy transcription given optional context text. An empty context string
// takes the same path as no context.
template <typename S>
std::string transcribe(const BoundModel<S>& m, const AudioFeatures& feats, const std::optional<std::string>& context,
                       MaskKind mask, std::size_t max_context = kMaxContextTokens,
                       std::size_t max_new_tokens = kMaxTranscriptTokens) {
  NoGradGuard no_grad;
  const CharTokenizer tok;
  auto audio = m.encoder.encode(features_tensor<S>(feats), {});
  std::vector<int> ctx_ids;
  if (context) ctx_ids = tok.tokenize(*context);
  auto p = assemble_prompt(m.decoder, ctx_ids.empty() ? nullptr : &ctx_ids, audio, {}, PromptMode::infer, nullptr,
                           max_context);
  const MaskScheme scheme{mask, p.prefix_len};
  const Tensor<S>* cross = p.cross_source.defined() ? &p.cross_source : nullptr;
  const auto ids = greedy_generate(m.decoder, p.embeddings, max_new_tokens, scheme, cross, CharTokenizer::kEos);
  return tok.detokenize(ids);
}

}  // namespace ctxasr
