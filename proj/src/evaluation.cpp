#include "biascope/evaluation.hpp"

#include "biascope/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace biascope {

using nlohmann::json;

Tensor TransformerLogitModel::all_logits(std::span<const int> tokens) const {
    std::vector<uint8_t> mask(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) mask[i] = tokens[i] != pad_;
    ForwardOptions opts;
    opts.key_mask = &mask;
    return model_->forward(tokens, opts).logits;
}

LengthMode parse_length_mode(const std::string& text) {
    if (text == "total") return LengthMode::TotalLogProb;
    if (text == "mean") return LengthMode::MeanPerToken;
    throw std::invalid_argument("unknown length mode '" + text + "'");
}

namespace {

double log_softmax_at(const float* row, int vocab, int target) {
    double mx = row[0];
    for (int i = 1; i < vocab; ++i) mx = std::max(mx, static_cast<double>(row[i]));
    double denom = 0.0;
    for (int i = 0; i < vocab; ++i) denom += std::exp(static_cast<double>(row[i]) - mx);
    return static_cast<double>(row[target]) - mx - std::log(denom);
}

double prob_at(const float* row, int vocab, int target) {
    return std::exp(log_softmax_at(row, vocab, target));
}

}  // namespace

double sequence_score(const LogitModel& model, std::span<const int> tokens, LengthMode mode) {
    if (tokens.size() < 2) throw std::invalid_argument("sequence_score: need >= 2 tokens");
    const Tensor logits = model.all_logits(tokens);
    const int vocab = model.vocab_size();
    double total = 0.0;
    int count = 0;
    for (size_t t = 1; t < tokens.size(); ++t) {
        if (tokens[t] == Vocab::kPad) continue;
        total += log_softmax_at(logits.ptr() + (t - 1) * vocab, vocab, tokens[t]);
        ++count;
    }
    if (count == 0) throw std::invalid_argument("sequence_score: no scorable positions");
    return mode == LengthMode::TotalLogProb ? total : total / count;
}

double stereotype_score(const LogitModel& model, const std::vector<MinimalPair>& pairs,
                        LengthMode mode, int jobs) {
    if (pairs.empty()) throw std::invalid_argument("stereotype_score: no pairs");
    std::vector<uint8_t> stereo(pairs.size());
    parallel_for(pairs.size(), jobs, [&](size_t i) {
        const double sx = sequence_score(model, pairs[i].x, mode);
        const double scf = sequence_score(model, pairs[i].x_cf, mode);
        stereo[i] = sx > scf;
    });
    double acc = 0.0;
    for (const uint8_t s : stereo) acc += s;
    return acc / static_cast<double>(pairs.size());
}

double professions_score(const LogitModel& model, const std::vector<MinimalPair>& pairs,
                         int jobs) {
    if (pairs.empty()) throw std::invalid_argument("professions_score: no pairs");
    const int vocab = model.vocab_size();
    std::vector<uint8_t> stereo(pairs.size());
    parallel_for(pairs.size(), jobs, [&](size_t i) {
        const MinimalPair& p = pairs[i];
        if (!p.has_continuations())
            throw std::invalid_argument("professions_score: pair lacks continuation tokens");
        const Tensor logits = model.all_logits(p.x);
        const float* last = logits.ptr() + (p.x.size() - 1) * vocab;
        stereo[i] = prob_at(last, vocab, p.y_stereo) > prob_at(last, vocab, p.y_anti);
    });
    double acc = 0.0;
    for (const uint8_t s : stereo) acc += s;
    return acc / static_cast<double>(pairs.size());
}

double perplexity(const LogitModel& model, const std::vector<std::vector<int>>& corpus,
                  int jobs) {
    if (corpus.empty()) throw std::invalid_argument("perplexity: empty corpus");
    const int vocab = model.vocab_size();
    std::vector<double> nll(corpus.size(), 0.0);
    std::vector<int> counts(corpus.size(), 0);
    parallel_for(corpus.size(), jobs, [&](size_t i) {
        const auto& seq = corpus[i];
        if (seq.size() < 2) return;
        const Tensor logits = model.all_logits(seq);
        for (size_t t = 1; t < seq.size(); ++t) {
            if (seq[t] == Vocab::kPad) continue;
            nll[i] -= log_softmax_at(logits.ptr() + (t - 1) * vocab, vocab, seq[t]);
            ++counts[i];
        }
    });
    double total = 0.0;
    long predicted = 0;
    for (size_t i = 0; i < corpus.size(); ++i) {
        total += nll[i];
        predicted += counts[i];
    }
    if (predicted == 0) throw std::invalid_argument("perplexity: no scorable positions");
    return std::exp(total / static_cast<double>(predicted));
}

double minimal_pair_accuracy(const LogitModel& model, const std::vector<MinimalPair>& pairs,
                             LengthMode mode, int jobs) {
    if (pairs.empty()) throw std::invalid_argument("minimal_pair_accuracy: no pairs");
    std::vector<uint8_t> correct(pairs.size());
    parallel_for(pairs.size(), jobs, [&](size_t i) {
        const double good = sequence_score(model, pairs[i].x, mode);
        const double bad = sequence_score(model, pairs[i].x_cf, mode);
        correct[i] = good > bad;
    });
    double acc = 0.0;
    for (const uint8_t c : correct) acc += c;
    return acc / static_cast<double>(pairs.size());
}

void save_eval_report(const std::filesystem::path& path, const EvalReport& report) {
    json examples = json::array();
    for (const auto& e : report.examples)
        examples.push_back({{"pair_id", e.pair_id},
                            {"score_x", e.score_x},
                            {"score_cf", e.score_cf},
                            {"preferred_stereo", e.preferred_stereo}});
    const json j = {{"model_tag", report.model_tag},
                    {"seed", report.seed},
                    {"metrics", report.metrics},
                    {"examples", examples}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write report " + path.string());
    out << j.dump(2) << "\n";
}

EvalReport load_eval_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report " + path.string());
    json j;
    in >> j;
    EvalReport report;
    report.model_tag = j.at("model_tag").get<std::string>();
    report.seed = j.at("seed").get<uint64_t>();
    for (const auto& [k, v] : j.at("metrics").items()) report.metrics[k] = v.get<double>();
    for (const auto& e : j.value("examples", json::array()))
        report.examples.push_back({e.at("pair_id").get<int>(), e.at("score_x").get<double>(),
                                   e.at("score_cf").get<double>(),
                                   e.at("preferred_stereo").get<bool>()});
    return report;
}

bool metric_higher_is_better(const std::string& name) {
    // Bias scores and perplexity improve downward; accuracy-style metrics
    // improve upward.
    return name.find("accuracy") != std::string::npos || name.find("blimp") != std::string::npos;
}

namespace {

struct TagStats {
    std::string tag;
    std::map<std::string, std::vector<double>> values;
};

double mean_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (const double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

double stddev_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double mu = mean_of(v);
    double acc = 0.0;
    for (const double x : v) acc += (x - mu) * (x - mu);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

double percent_improvement(const std::string& metric, double baseline, double value) {
    if (std::fabs(baseline) < 1e-300) return 0.0;
    const double delta = metric_higher_is_better(metric) ? value - baseline : baseline - value;
    return 100.0 * delta / std::fabs(baseline);
}

}  // namespace

void emit_report(const std::vector<EvalReport>& reports, const std::string& baseline_tag,
                 const std::filesystem::path& out_base) {
    if (reports.empty()) throw std::invalid_argument("emit_report: no reports");

    std::vector<TagStats> groups;
    std::vector<std::string> metric_names;
    for (const auto& r : reports) {
        auto it = std::find_if(groups.begin(), groups.end(),
                               [&](const TagStats& g) { return g.tag == r.model_tag; });
        if (it == groups.end()) {
            groups.push_back({r.model_tag, {}});
            it = groups.end() - 1;
        }
        for (const auto& [name, value] : r.metrics) {
            it->values[name].push_back(value);
            if (std::find(metric_names.begin(), metric_names.end(), name) == metric_names.end())
                metric_names.push_back(name);
        }
    }
    std::sort(metric_names.begin(), metric_names.end());

    const auto baseline = std::find_if(groups.begin(), groups.end(),
                                       [&](const TagStats& g) { return g.tag == baseline_tag; });
    if (baseline == groups.end())
        throw std::invalid_argument("emit_report: baseline tag '" + baseline_tag +
                                    "' not among reports");

    json out_groups = json::array();
    std::ostringstream table, tsv;
    table << std::left << std::setw(22) << "model";
    tsv << "model";
    for (const auto& m : metric_names) {
        table << std::setw(26) << (m + " (abs / %impr)");
        tsv << "\t" << m << "\t" << m << "_std\t" << m << "_improvement";
    }
    table << "\n";
    tsv << "\n";

    for (const auto& g : groups) {
        json jg = {{"model_tag", g.tag}, {"n_runs", g.values.empty() ? 0 : static_cast<int>(g.values.begin()->second.size())}};
        json metrics = json::object();
        table << std::left << std::setw(22) << g.tag;
        tsv << g.tag;
        for (const auto& m : metric_names) {
            const auto it = g.values.find(m);
            if (it == g.values.end()) {
                table << std::setw(26) << "-";
                tsv << "\t-\t-\t-";
                continue;
            }
            const double mu = mean_of(it->second);
            const double sd = stddev_of(it->second);
            const double base_mu = mean_of(baseline->values.at(m));
            const double impr = percent_improvement(m, base_mu, mu);
            metrics[m] = {{"mean", mu}, {"stddev", sd}, {"improvement_pct", impr}};
            char cell[64];
            std::snprintf(cell, sizeof cell, "%.4f / %+.1f%%", mu, impr);
            table << std::setw(26) << cell;
            char nums[96];
            std::snprintf(nums, sizeof nums, "\t%.17g\t%.17g\t%.17g", mu, sd, impr);
            tsv << nums;
        }
        table << "\n";
        tsv << "\n";
        jg["metrics"] = metrics;
        out_groups.push_back(jg);
    }

    const json j = {{"baseline", baseline_tag}, {"models", out_groups}};
    {
        std::ofstream out(out_base.string() + ".json", std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + out_base.string() + ".json");
        out << j.dump(2) << "\n";
    }
    {
        std::ofstream out(out_base.string() + ".txt", std::ios::trunc);
        out << "baseline: " << baseline_tag << "\n" << table.str();
    }
    {
        std::ofstream out(out_base.string() + ".tsv", std::ios::trunc);
        out << tsv.str();
    }
}

}  // namespace biascope
