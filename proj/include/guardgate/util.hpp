#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace guardgate::util {

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// derived draws below avoid std::uniform_*_distribution, whose sequences
// are implementation-defined, so outputs are byte-stable across platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform in [0, n). n must be > 0.
    std::size_t next_index(std::size_t n) {
        return static_cast<std::size_t>(engine_() % n);
    }

    // Uniform in [-1, 1).
    double next_signed_unit() { return next_double() * 2.0 - 1.0; }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[next_index(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
};

std::uint64_t fnv1a64(std::string_view data);
std::string fnv1a64_hex(std::string_view data);

// Mixes a request identifier into a global seed so concurrent requests never
// share generator state.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view request_id);

// --- UTF-8 ---

bool is_valid_utf8(std::string_view text);

// Decodes the codepoint starting at byte offset `pos`; advances `pos` past it.
// Returns nullopt on malformed input.
std::optional<char32_t> utf8_next(std::string_view text, std::size_t& pos);

void utf8_append(std::string& out, char32_t cp);

// Unicode classes used by the sanitizer.
bool is_ws_codepoint(char32_t cp);           // whitespace incl. Zs
bool is_nonprintable_codepoint(char32_t cp); // Cc/Cf except \n, \t

// --- string helpers ---

std::string to_lower_ascii(std::string_view text);
std::string collapse_whitespace(std::string_view text);  // ASCII-level collapse
std::vector<std::string> split_ws(std::string_view text);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);

}  // namespace guardgate::util
