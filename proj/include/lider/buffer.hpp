#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "lider/errors.hpp"
#include "lider/rng.hpp"

namespace lider {

struct BufferEntry {
    std::vector<double> x;
    int y = 0;
    std::optional<std::vector<double>> stored_logits;  // captured at insertion (DER++)
    int task_id = 0;
    long insertion_step = 0;
};

// Label poisoning applied as entries are stored: with probability p the kept
// label is redrawn uniformly from the current task's classes minus the true
// one. The in-stream copy used for the current step keeps its true label.
struct PoisonConfig {
    double p = 0.0;
    std::vector<int> pool;

    void validate() const {
        if (p < 0.0 || p > 1.0) throw ConfigError("poison: p must lie in [0, 1]");
    }
};

// Capacity-bounded reservoir of past examples. Classic algorithm R: the
// N-th item draws one index j in [0, N) and lands in slot j iff j < capacity,
// which keeps every past item resident with probability capacity / N.
class MemoryBuffer {
public:
    MemoryBuffer(std::size_t capacity, Rng rng) : capacity_(capacity), rng_(rng) {}

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    long seen_count() const { return seen_; }
    const std::vector<BufferEntry>& entries() const { return entries_; }
    const BufferEntry& entry(std::size_t i) const { return entries_[i]; }
    Rng& rng() { return rng_; }

    void insert(BufferEntry entry, const std::optional<PoisonConfig>& poison = std::nullopt) {
        insert_with(std::move(entry), poison, rng_);
    }

    // Rebuild a buffer from dumped state (for offline analyses).
    static MemoryBuffer restore(std::size_t capacity, long seen, std::vector<BufferEntry> entries,
                                Rng rng) {
        if (entries.size() > capacity)
            throw ConfigError("buffer restore: more entries than capacity");
        MemoryBuffer b(capacity, rng);
        b.entries_ = std::move(entries);
        b.seen_ = seen;
        return b;
    }

    // Core insertion with an injectable random source, so tests can
    // enumerate every outcome exactly.
    template <typename RngT>
    void insert_with(BufferEntry entry, const std::optional<PoisonConfig>& poison, RngT& rng) {
        if (poison) poison->validate();
        ++seen_;
        if (capacity_ == 0) return;
        if (entries_.size() < capacity_) {
            place(std::move(entry), entries_.size(), poison, rng, /*append=*/true);
            return;
        }
        const std::size_t j = rng.uniform_index(static_cast<std::size_t>(seen_));
        if (j < capacity_) place(std::move(entry), j, poison, rng, /*append=*/false);
    }

private:
    template <typename RngT>
    void place(BufferEntry entry, std::size_t slot, const std::optional<PoisonConfig>& poison,
               RngT& rng, bool append) {
        if (poison && poison->p > 0.0 && rng.uniform() < poison->p) {
            std::vector<int> candidates;
            for (int c : poison->pool)
                if (c != entry.y) candidates.push_back(c);
            if (!candidates.empty()) entry.y = candidates[rng.uniform_index(candidates.size())];
        }
        if (append)
            entries_.push_back(std::move(entry));
        else
            entries_[slot] = std::move(entry);
    }

    std::size_t capacity_;
    std::vector<BufferEntry> entries_;
    long seen_ = 0;
    Rng rng_;
};

inline void reservoir_insert(MemoryBuffer& buffer, BufferEntry entry,
                             const std::optional<PoisonConfig>& poison = std::nullopt) {
    buffer.insert(std::move(entry), poison);
}

// n entries drawn uniformly with replacement.
inline std::vector<BufferEntry> sample_batch(const MemoryBuffer& buffer, std::size_t n,
                                             Rng& rng) {
    if (buffer.empty()) throw ConfigError("sample_batch: buffer is empty");
    std::vector<BufferEntry> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(buffer.entry(rng.uniform_index(buffer.size())));
    return out;
}

}  // namespace lider
