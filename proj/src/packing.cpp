#include "lce/packing.hpp"

#include <algorithm>

namespace lce {

namespace {

struct Chunk {
  std::string id;
  const int32_t* tokens;
  int64_t len;
};

}  // namespace

std::vector<Pack> pack_documents(const std::vector<Document>& docs, const PackingConfig& cfg) {
  if (cfg.max_len < 1) throw ValueError("pack_documents: max_len must be >= 1");
  const bool with_sep = cfg.mask_mode == MaskMode::full;

  std::vector<Chunk> chunks;
  for (const Document& doc : docs) {
    if (doc.tokens.empty()) throw DataError("pack_documents: empty document '" + doc.id + "'");
    const int64_t len = int64_t(doc.tokens.size());
    if (len <= cfg.max_len) {
      chunks.push_back({doc.id, doc.tokens.data(), len});
    } else if (cfg.truncation == Truncation::drop_tail) {
      chunks.push_back({doc.id, doc.tokens.data(), cfg.max_len});
    } else {
      int64_t off = 0, part = 0;
      while (off < len) {
        int64_t n = std::min(cfg.max_len, len - off);
        chunks.push_back({doc.id + ":" + std::to_string(part), doc.tokens.data() + off, n});
        off += n;
        ++part;
      }
    }
  }

  // Bin filling works on chunk indices; tokens are materialized afterwards.
  std::vector<std::vector<size_t>> bins;
  std::vector<int64_t> used;
  for (size_t c = 0; c < chunks.size(); ++c) {
    const int64_t len = chunks[c].len;
    int64_t target = -1;
    if (cfg.policy == PackPolicy::first_fit) {
      for (size_t b = 0; b < bins.size(); ++b) {
        int64_t need = len + (with_sep && used[b] > 0 ? 1 : 0);
        if (used[b] + need <= cfg.max_len) {
          target = int64_t(b);
          break;
        }
      }
    } else if (!bins.empty()) {
      size_t b = bins.size() - 1;
      int64_t need = len + (with_sep && used[b] > 0 ? 1 : 0);
      if (used[b] + need <= cfg.max_len) target = int64_t(b);
    }
    if (target < 0) {
      bins.emplace_back();
      used.push_back(0);
      target = int64_t(bins.size()) - 1;
    }
    bins[size_t(target)].push_back(c);
    used[size_t(target)] += len + (with_sep && used[size_t(target)] > 0 ? 1 : 0);
  }

  std::vector<Pack> packs;
  packs.reserve(bins.size());
  for (const auto& bin : bins) {
    Pack pack;
    pack.mask_mode = cfg.mask_mode;
    pack.tokens.assign(size_t(cfg.max_len), cfg.pad_id);
    pack.positions.assign(size_t(cfg.max_len), 0);
    int64_t at = 0;
    for (size_t idx = 0; idx < bin.size(); ++idx) {
      const Chunk& ch = chunks[bin[idx]];
      if (with_sep && at > 0) {
        pack.tokens[size_t(at)] = cfg.sep_id;
        pack.spans.push_back({"", at, at + 1, true});
        ++at;
      }
      std::copy_n(ch.tokens, ch.len, pack.tokens.begin() + at);
      pack.spans.push_back({ch.id, at, at + ch.len, false});
      at += ch.len;
    }
    pack.fill = at;
    if (cfg.positions == PositionMode::per_document) {
      for (const Span& sp : pack.spans)
        for (int64_t i = sp.start; i < sp.end; ++i) pack.positions[size_t(i)] = int32_t(i - sp.start);
    } else {
      for (int64_t i = 0; i < cfg.max_len; ++i) pack.positions[size_t(i)] = int32_t(i);
    }
    packs.push_back(std::move(pack));
  }
  return packs;
}

PackingStats packing_stats(const std::vector<Pack>& packs) {
  PackingStats st;
  st.num_packs = int64_t(packs.size());
  st.fill_histogram.assign(10, 0);
  if (packs.empty()) return st;
  int64_t total_docs = 0, capacity = 0;
  for (const Pack& p : packs) {
    st.total_padding += p.max_len() - p.fill;
    capacity += p.max_len();
    for (const Span& sp : p.spans)
      if (!sp.separator) ++total_docs;
    double frac = double(p.fill) / double(p.max_len());
    int bin = std::min(9, int(frac * 10.0));
    ++st.fill_histogram[size_t(bin)];
  }
  st.padding_fraction = double(st.total_padding) / double(capacity);
  st.mean_docs_per_pack = double(total_docs) / double(st.num_packs);
  return st;
}

}  // namespace lce
