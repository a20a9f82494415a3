#include "biascope/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace biascope {

using nlohmann::json;

Vocab::Vocab() {
    add("<pad>");
    add("<unk>");
}

int Vocab::add(const std::string& token) {
    auto it = token_to_id.find(token);
    if (it != token_to_id.end()) return it->second;
    const int id = static_cast<int>(id_to_token.size());
    id_to_token.push_back(token);
    token_to_id.emplace(token, id);
    return id;
}

int Vocab::id(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
}

bool Vocab::contains(const std::string& token) const { return token_to_id.count(token) != 0; }

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("vocab id " + std::to_string(id));
    return id_to_token[static_cast<size_t>(id)];
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write vocab " + path.string());
    for (const auto& t : id_to_token) out << t << "\n";
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocab " + path.string());
    Vocab v;
    v.id_to_token.clear();
    v.token_to_id.clear();
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        v.token_to_id.emplace(line, static_cast<int>(v.id_to_token.size()));
        v.id_to_token.push_back(line);
    }
    if (v.size() < 2 || v.id_to_token[0] != "<pad>" || v.id_to_token[1] != "<unk>")
        throw std::runtime_error("vocab file " + path.string() + " lacks reserved <pad>/<unk> rows");
    return v;
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    for (const char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!word.empty()) out.push_back(std::move(word));
            word.clear();
        } else {
            word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!word.empty()) out.push_back(std::move(word));
    return out;
}

std::vector<int> encode(const Vocab& vocab, const std::string& text, size_t* unk_count) {
    std::vector<int> ids;
    for (const auto& w : tokenize(text)) {
        const int id = vocab.id(w);
        if (id == Vocab::kUnk && unk_count) ++*unk_count;
        ids.push_back(id);
    }
    return ids;
}

Vocab build_vocab(const std::vector<std::string>& documents) {
    Vocab v;
    for (const auto& doc : documents)
        for (const auto& w : tokenize(doc)) v.add(w);
    return v;
}

Stereotype parse_stereotype(const std::string& text) {
    if (text == "male" || text == "m") return Stereotype::Male;
    if (text == "female" || text == "f") return Stereotype::Female;
    throw std::invalid_argument("unknown stereotype label '" + text + "'");
}

std::string stereotype_str(Stereotype s) { return s == Stereotype::Male ? "male" : "female"; }

namespace {

std::vector<uint8_t> key_mask_of(const std::vector<int>& ids) {
    std::vector<uint8_t> mask(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) mask[i] = ids[i] != Vocab::kPad;
    return mask;
}

}  // namespace

std::vector<uint8_t> MinimalPair::x_key_mask() const { return key_mask_of(x); }
std::vector<uint8_t> MinimalPair::x_cf_key_mask() const { return key_mask_of(x_cf); }

std::vector<std::string> load_templates(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open templates " + path.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        out.push_back(line);
    }
    return out;
}

std::vector<ProfessionEntry> load_professions(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open professions " + path.string());
    std::vector<ProfessionEntry> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("professions " + path.string() + ":" + std::to_string(lineno) +
                                     ": expected 'surface<TAB>male|female'");
        out.push_back({line.substr(0, tab), parse_stereotype(line.substr(tab + 1))});
    }
    return out;
}

namespace {

constexpr const char* kSlot = "{profession}";

// Splits "The {profession} said that" into prefix/suffix around the slot.
std::pair<std::string, std::string> split_template(const std::string& tmpl) {
    const size_t at = tmpl.find(kSlot);
    if (at == std::string::npos)
        throw std::invalid_argument("template lacks a {profession} slot: '" + tmpl + "'");
    if (tmpl.find(kSlot, at + 1) != std::string::npos)
        throw std::invalid_argument("template has multiple {profession} slots: '" + tmpl + "'");
    return {tmpl.substr(0, at), tmpl.substr(at + std::strlen(kSlot))};
}

// Left-pads the shorter id sequence so both end at the same final position.
void align_pair(std::vector<int>& a, std::vector<int>& b) {
    while (a.size() < b.size()) a.insert(a.begin(), Vocab::kPad);
    while (b.size() < a.size()) b.insert(b.begin(), Vocab::kPad);
}

MinimalPair make_pair_record(const std::string& text, const std::string& counterfactual,
                             const std::string& stereo_word, const std::string& anti_word,
                             int template_id, const std::string& profession, Vocab& vocab,
                             bool extend_vocab, size_t* unk_count) {
    MinimalPair pair;
    pair.text = text;
    pair.counterfactual = counterfactual;
    pair.template_id = template_id;
    pair.profession = profession;
    if (extend_vocab) {
        for (const auto& w : tokenize(text)) vocab.add(w);
        for (const auto& w : tokenize(counterfactual)) vocab.add(w);
    }
    pair.x = encode(vocab, text, unk_count);
    pair.x_cf = encode(vocab, counterfactual, unk_count);
    align_pair(pair.x, pair.x_cf);
    if (!stereo_word.empty()) {
        if (extend_vocab) {
            vocab.add(stereo_word);
            vocab.add(anti_word);
        }
        pair.y_stereo = vocab.id(stereo_word);
        pair.y_anti = vocab.id(anti_word);
        if (pair.y_stereo == pair.y_anti)
            throw std::invalid_argument("pair continuations collide: '" + stereo_word + "' vs '" +
                                        anti_word + "'");
    }
    return pair;
}

}  // namespace

std::vector<MinimalPair> generate_professions(const std::vector<std::string>& templates,
                                              const std::vector<ProfessionEntry>& professions,
                                              Vocab& vocab) {
    std::set<std::string> seen;
    for (const auto& p : professions)
        if (!seen.insert(p.surface).second)
            throw std::invalid_argument("duplicate profession surface '" + p.surface + "'");

    std::vector<MinimalPair> out;
    out.reserve(templates.size() * professions.size());
    for (size_t ti = 0; ti < templates.size(); ++ti) {
        const auto [prefix, suffix] = split_template(templates[ti]);
        for (const auto& prof : professions) {
            const bool female = prof.stereotype == Stereotype::Female;
            const std::string noun = female ? "man" : "woman";
            const std::string stereo = female ? "she" : "he";
            const std::string anti = female ? "he" : "she";
            out.push_back(make_pair_record(prefix + prof.surface + suffix, prefix + noun + suffix,
                                           stereo, anti, static_cast<int>(ti), prof.surface, vocab,
                                           /*extend_vocab=*/true, nullptr));
        }
    }
    return out;
}

PairSchema parse_schema(const std::string& text) {
    if (text == "prefix" || text == "prefix-continuations") return PairSchema::PrefixContinuations;
    if (text == "sentences" || text == "sentence-pair") return PairSchema::SentencePair;
    throw std::invalid_argument("unknown pair schema '" + text + "'");
}

void save_minimal_pairs(const std::filesystem::path& path, const std::vector<MinimalPair>& pairs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write dataset " + path.string());
    for (const auto& p : pairs) {
        json rec = {{"text", p.text}, {"counterfactual", p.counterfactual}};
        if (p.has_continuations()) {
            rec["stereo"] = p.y_stereo;
            rec["anti"] = p.y_anti;
        }
        if (p.template_id >= 0) rec["template_id"] = p.template_id;
        if (!p.profession.empty()) rec["profession"] = p.profession;
        out << rec.dump() << "\n";
    }
}

PairLoadReport load_minimal_pairs(const std::filesystem::path& path, PairSchema schema,
                                  Vocab& vocab, bool extend_vocab) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset " + path.string());
    PairLoadReport report;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                                     ": parse error: " + e.what());
        }
        const auto field = [&](const char* key) {
            if (!rec.contains(key))
                throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                                         ": missing field '" + key + "'");
            return rec.at(key);
        };
        const std::string text = field("text").get<std::string>();
        const std::string counter = field("counterfactual").get<std::string>();
        std::string stereo_word, anti_word;
        if (schema == PairSchema::PrefixContinuations) {
            auto token_text = [&](const char* key) {
                const json& v = field(key);
                return v.is_number_integer() ? vocab.token(v.get<int>()) : v.get<std::string>();
            };
            stereo_word = token_text("stereo");
            anti_word = token_text("anti");
        }
        MinimalPair pair = make_pair_record(
            text, counter, stereo_word, anti_word,
            rec.value("template_id", -1), rec.value("profession", std::string{}), vocab,
            extend_vocab, &report.unk_words);
        report.pairs.push_back(std::move(pair));
    }
    if (report.pairs.empty())
        throw std::runtime_error("dataset " + path.string() + " contains no records");
    return report;
}

void save_labeled_corpus(const std::filesystem::path& path,
                         const std::vector<LabeledSequence>& corpus) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write corpus " + path.string());
    for (const auto& s : corpus)
        out << (s.label == Stereotype::Male ? "m" : "f") << "\t" << s.text << "\n";
}

std::vector<LabeledSequence> load_labeled_corpus(const std::filesystem::path& path, Vocab& vocab,
                                                 bool extend_vocab) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus " + path.string());
    std::vector<LabeledSequence> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                                     ": expected 'm|f<TAB>text'");
        LabeledSequence seq;
        seq.label = parse_stereotype(line.substr(0, tab));
        seq.text = line.substr(tab + 1);
        if (extend_vocab)
            for (const auto& w : tokenize(seq.text)) vocab.add(w);
        seq.tokens = encode(vocab, seq.text);
        out.push_back(std::move(seq));
    }
    return out;
}

std::vector<std::vector<int>> load_token_corpus(const std::filesystem::path& path, Vocab& vocab,
                                                bool extend_vocab) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus " + path.string());
    std::vector<std::vector<int>> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (extend_vocab)
            for (const auto& w : tokenize(line)) vocab.add(w);
        out.push_back(encode(vocab, line));
    }
    return out;
}

void save_token_corpus(const std::filesystem::path& path, const std::vector<std::string>& lines) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write corpus " + path.string());
    for (const auto& l : lines) out << l << "\n";
}

}  // namespace biascope
