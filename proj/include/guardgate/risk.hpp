#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace guardgate {

using EmbeddingVector = std::vector<double>;

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    // Throws EmbedderUnavailable on failure. All vectors share one dim.
    virtual std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) = 0;
};

// Deterministic offline embedder: feature-hashing bag of words, fixed dim.
// Lowercased whitespace tokens hash to a bucket; the hash's top bit picks the
// sign. Keeps desk-scale runs hermetic.
class HashingEmbedder : public EmbeddingProvider {
public:
    explicit HashingEmbedder(std::size_t dim = 256) : dim_(dim) {}
    std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override;

private:
    std::size_t dim_;
};

// Wire contract: POST {"texts": [string]} -> {"vectors": [[number]]}.
// dim is discovered on the first call and pinned.
class RemoteEmbedder : public EmbeddingProvider {
public:
    RemoteEmbedder(std::string base_url, std::string path = "/embed", int timeout_sec = 10);
    std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override;

private:
    std::string base_url_;
    std::string path_;
    int timeout_sec_;
    std::size_t pinned_dim_ = 0;
};

struct UnsafeCentroid {
    EmbeddingVector vector;
    std::size_t corpus_size = 0;
    std::string corpus_hash;

    std::string to_json() const;
    static UnsafeCentroid from_json(const std::string& json_text);
    static UnsafeCentroid load(const std::string& path);
    void save(const std::string& path) const;
};

enum class RiskTier { low, medium, high };

const char* tier_name(RiskTier tier);
RiskTier bump_tier(RiskTier tier);  // one step up, saturating at high

struct RiskAssessment {
    double cos_original = 0.0;
    double cos_paraphrased = 0.0;
    double risk_score = 0.0;  // (max(cos_original, cos_paraphrased) + 1) / 2
    RiskTier tier = RiskTier::low;
    bool degraded = false;  // embedder was unreachable and policy failed open
};

struct RiskPolicy {
    double medium_threshold = 0.75;  // cosine 0.5 on the [0,1] scale
    double high_threshold = 0.90;    // cosine 0.8
    std::map<RiskTier, std::string> system_prompts;
    bool fail_closed = true;  // embedder failure -> tier high; otherwise low + degraded

    static RiskPolicy defaults();
    void validate() const;  // throws ValidationError
};

double cosine(const EmbeddingVector& a, const EmbeddingVector& b);
EmbeddingVector normalized(const EmbeddingVector& v);

UnsafeCentroid build_centroid(const std::vector<std::string>& corpus, EmbeddingProvider& embedder);

RiskAssessment assess(const std::string& original, const std::string& paraphrased,
                      const UnsafeCentroid& centroid, EmbeddingProvider& embedder,
                      const RiskPolicy& policy);

RiskTier tier_for_score(double risk_score, const RiskPolicy& policy);

std::string select_system_prompt(const RiskAssessment& assessment, const RiskPolicy& policy);

}  // namespace guardgate
