#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hydra/scene.hpp"

namespace hydra {

// Load failures carry the offending record index when one is known.
struct CorpusError : std::runtime_error {
    explicit CorpusError(const std::string& msg, int64_t record_index = -1)
        : std::runtime_error(msg), record(record_index) {}
    int64_t record;
};

struct CorpusManifest {
    int64_t count = 0;
    int image_size = 0;
    int shard_size = 0;
    std::vector<std::string> vocab_tokens;
};

// Directory layout: `manifest` (JSON) + per-shard raw little-endian float32
// image tensors (`images_NNNN.bin`) and int32 token streams (`tokens_NNNN.bin`).
// Round-trips are bit-exact; per-record CRC32 checksums gate loading.
void write_corpus(const std::vector<CorpusRecord>& records, const std::string& dir,
                  int shard_size = 256);
std::vector<CorpusRecord> read_corpus(const std::string& dir);
CorpusManifest read_corpus_manifest(const std::string& dir);

// Convenience: deterministic corpus synthesis (seeds base..base+count-1).
std::vector<CorpusRecord> make_corpus(int64_t count, uint64_t base_seed, int image_size,
                                      double multi_fraction);

}  // namespace hydra
