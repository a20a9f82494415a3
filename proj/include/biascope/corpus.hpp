#pragma once

// Counterfactual minimal-pair datasets and the word-level tokenizer.
// Dataset files are JSONL, one record per line; vocabularies are one token
// per line with the line index as id.

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace biascope {

struct Vocab {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int> token_to_id;

    Vocab();

    int add(const std::string& token);
    int id(const std::string& token) const;  // kUnk when absent
    bool contains(const std::string& token) const;
    const std::string& token(int id) const;
    int size() const { return static_cast<int>(id_to_token.size()); }

    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);
};

// Lowercased, whitespace-split word tokens.
std::vector<std::string> tokenize(const std::string& text);
std::vector<int> encode(const Vocab& vocab, const std::string& text, size_t* unk_count = nullptr);
Vocab build_vocab(const std::vector<std::string>& documents);

enum class Stereotype { Male, Female };

Stereotype parse_stereotype(const std::string& text);
std::string stereotype_str(Stereotype s);

struct ProfessionEntry {
    std::string surface;
    Stereotype stereotype;
};

struct MinimalPair {
    std::vector<int> x;     // stereo-inducing prefix, PAD-aligned with x_cf
    std::vector<int> x_cf;  // counterfactual prefix, same length
    int y_stereo = -1;      // continuation token ids; -1 for sentence-pair data
    int y_anti = -1;
    int template_id = -1;
    std::string profession;
    std::string text;
    std::string counterfactual;

    int final_pos() const { return static_cast<int>(x.size()) - 1; }
    bool has_continuations() const { return y_stereo >= 0 && y_anti >= 0; }
    // 1 = attendable, 0 = PAD filler.
    std::vector<uint8_t> x_key_mask() const;
    std::vector<uint8_t> x_cf_key_mask() const;
};

std::vector<std::string> load_templates(const std::filesystem::path& path);
std::vector<ProfessionEntry> load_professions(const std::filesystem::path& path);

// One pair per (template, profession): the counterfactual replaces the
// profession with the opposite-gender noun, and the stereotype decides which
// pronoun is the stereotypical continuation. Extends the vocab in place.
std::vector<MinimalPair> generate_professions(const std::vector<std::string>& templates,
                                              const std::vector<ProfessionEntry>& professions,
                                              Vocab& vocab);

enum class PairSchema { PrefixContinuations, SentencePair };

PairSchema parse_schema(const std::string& text);

struct PairLoadReport {
    std::vector<MinimalPair> pairs;
    size_t unk_words = 0;
};

void save_minimal_pairs(const std::filesystem::path& path, const std::vector<MinimalPair>& pairs);
PairLoadReport load_minimal_pairs(const std::filesystem::path& path, PairSchema schema,
                                  Vocab& vocab, bool extend_vocab);

// Fine-tuning corpora: gender-labelled sequences, TSV "m|f<TAB>text".
struct LabeledSequence {
    std::vector<int> tokens;
    Stereotype label;
    std::string text;
};

void save_labeled_corpus(const std::filesystem::path& path,
                         const std::vector<LabeledSequence>& corpus);
std::vector<LabeledSequence> load_labeled_corpus(const std::filesystem::path& path, Vocab& vocab,
                                                 bool extend_vocab);

// Plain evaluation corpus: one whitespace-tokenized sequence per line.
std::vector<std::vector<int>> load_token_corpus(const std::filesystem::path& path, Vocab& vocab,
                                                bool extend_vocab);
void save_token_corpus(const std::filesystem::path& path, const std::vector<std::string>& lines);

}  // namespace biascope
