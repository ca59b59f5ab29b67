#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lce/tensor.hpp"

namespace lce {

struct Document {
  std::string id;
  std::vector<int32_t> tokens;
};

// Half-open token range inside a pack. Separator spans (naive mode only)
// carry separator=true and an empty doc id.
struct Span {
  std::string doc_id;
  int64_t start = 0;
  int64_t end = 0;
  bool separator = false;
};

enum class PackPolicy { first_fit, sequential };
enum class Truncation { split, drop_tail };
enum class PositionMode { per_document, continuous };
enum class MaskMode { block_diagonal, full };

struct PackingConfig {
  int64_t max_len = 512;
  PackPolicy policy = PackPolicy::first_fit;
  Truncation truncation = Truncation::split;
  PositionMode positions = PositionMode::per_document;
  // block_diagonal packs carry no separators; full (naive) mode separates
  // documents with sep_id and attends across the whole non-padding prefix.
  MaskMode mask_mode = MaskMode::block_diagonal;
  int32_t pad_id = 0;
  int32_t sep_id = 3;
};

struct Pack {
  std::vector<int32_t> tokens;     // length max_len, padded with pad_id
  std::vector<Span> spans;         // tile [0, fill); remainder is padding
  std::vector<int32_t> positions;  // length max_len
  MaskMode mask_mode = MaskMode::block_diagonal;
  int64_t fill = 0;

  int64_t max_len() const { return int64_t(tokens.size()); }
};

struct PackingStats {
  int64_t num_packs = 0;
  int64_t total_padding = 0;
  double padding_fraction = 0.0;   // padded positions / (num_packs * max_len)
  double mean_docs_per_pack = 0.0; // separator spans not counted
  std::vector<int64_t> fill_histogram;  // 10 equal-width bins over fill fraction
};

// Fills fixed-length packs with whole documents. Documents longer than
// max_len are split into chains of max_len chunks (or truncated to one chunk
// under drop_tail); every chunk's tokens land in exactly one pack and no
// span crosses a pack boundary. Deterministic given input order.
std::vector<Pack> pack_documents(const std::vector<Document>& docs, const PackingConfig& cfg);

PackingStats packing_stats(const std::vector<Pack>& packs);

// Additive mask [max_len, max_len]: 0 where i and j lie in the same span,
// forbidden otherwise. Padding attends only to itself so no softmax row is
// degenerate.
template <typename T>
Tensor<T> build_block_mask(const Pack& pack) {
  const int64_t n = pack.max_len();
  Tensor<T> mask(Shape{n, n}, T(kMaskForbidden));
  auto& mv = mask.data();
  for (const Span& sp : pack.spans)
    for (int64_t i = sp.start; i < sp.end; ++i)
      for (int64_t j = sp.start; j < sp.end; ++j) mv[size_t(i * n + j)] = T(0);
  for (int64_t i = pack.fill; i < n; ++i) mv[size_t(i * n + i)] = T(0);
  return mask;
}

// Full attention over the non-padding prefix (the contamination baseline);
// padding again keeps the self-attention diagonal.
template <typename T>
Tensor<T> build_naive_mask(const Pack& pack) {
  const int64_t n = pack.max_len();
  Tensor<T> mask(Shape{n, n}, T(kMaskForbidden));
  auto& mv = mask.data();
  for (int64_t i = 0; i < pack.fill; ++i)
    for (int64_t j = 0; j < pack.fill; ++j) mv[size_t(i * n + j)] = T(0);
  for (int64_t i = pack.fill; i < n; ++i) mv[size_t(i * n + i)] = T(0);
  return mask;
}

template <typename T>
Tensor<T> build_mask(const Pack& pack) {
  return pack.mask_mode == MaskMode::block_diagonal ? build_block_mask<T>(pack)
                                                    : build_naive_mask<T>(pack);
}

}  // namespace lce
