#include "mtadapt/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <string>

#include "json.hpp"

namespace mtadapt {

namespace {

bool is_open(int t) { return t == tok::kOpenParen || t == tok::kOpenSquare; }

int closer_for(int t) {
  return t == tok::kOpenParen ? tok::kCloseParen : tok::kCloseSquare;
}

// Independent of the generator: plain stack check.
bool brackets_valid(const std::vector<int>& tokens) {
  std::vector<int> stack;
  for (int t : tokens) {
    if (is_open(t)) {
      stack.push_back(t);
    } else if (t == tok::kCloseParen || t == tok::kCloseSquare) {
      if (stack.empty() || closer_for(stack.back()) != t) return false;
      stack.pop_back();
    } else {
      return false;
    }
  }
  return stack.empty();
}

std::vector<int> random_balanced(std::size_t len, Rng& rng) {
  std::vector<int> out;
  out.reserve(len);
  std::vector<int> stack;
  for (std::size_t i = 0; i < len; ++i) {
    const std::size_t remaining = len - i;
    const bool must_open = stack.empty();
    const bool must_close = stack.size() == remaining;
    if (must_open || (!must_close && rng.below(2) == 0)) {
      const int opener = rng.below(2) == 0 ? tok::kOpenParen : tok::kOpenSquare;
      stack.push_back(opener);
      out.push_back(opener);
    } else {
      out.push_back(closer_for(stack.back()));
      stack.pop_back();
    }
  }
  return out;
}

std::vector<int> corrupt_brackets(const std::vector<int>& valid, Rng& rng) {
  const int bracket_toks[4] = {tok::kOpenParen, tok::kCloseParen, tok::kOpenSquare,
                               tok::kCloseSquare};
  while (true) {
    std::vector<int> s = valid;
    if (rng.below(2) == 0) {
      // swap two positions holding different tokens
      const std::size_t i = rng.below(s.size());
      const std::size_t j = rng.below(s.size());
      if (s[i] == s[j]) continue;
      std::swap(s[i], s[j]);
    } else {
      // substitute one position with a different bracket
      const std::size_t i = rng.below(s.size());
      const int repl = bracket_toks[rng.below(4)];
      if (repl == s[i]) continue;
      s[i] = repl;
    }
    if (!brackets_valid(s)) return s;
  }
}

std::vector<Example> make_bracket_examples(std::size_t n, std::size_t seq_len, double imbalance,
                                           Rng& rng) {
  const std::size_t n_pos = static_cast<std::size_t>(std::llround(imbalance * static_cast<double>(n)));
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    if (i < n_pos) {
      ex.tokens = random_balanced(seq_len, rng);
    } else {
      ex.tokens = corrupt_brackets(random_balanced(seq_len, rng), rng);
    }
    ex.label = brackets_valid(ex.tokens) ? 1 : 0;
    out.push_back(std::move(ex));
  }
  shuffle(out, rng);
  return out;
}

bool is_permutation_pair(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> sa = a, sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  return sa == sb;
}

std::vector<Example> make_pair_examples(std::size_t n, std::size_t seg_len,
                                        std::size_t vocab_size, Rng& rng) {
  const std::size_t n_words = vocab_size - tok::kWordBase;
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> first(seg_len);
    for (auto& t : first) t = tok::kWordBase + static_cast<int>(rng.below(n_words));
    std::vector<int> second = first;
    shuffle(second, rng);
    const bool positive = i % 2 == 0;
    if (!positive) {
      const std::size_t p = rng.below(seg_len);
      int repl = second[p];
      while (repl == second[p]) {
        repl = tok::kWordBase + static_cast<int>(rng.below(n_words));
      }
      second[p] = repl;
    }
    Example ex;
    ex.tokens = first;
    ex.tokens.push_back(tok::kSep);
    ex.tokens.insert(ex.tokens.end(), second.begin(), second.end());
    ex.label = is_permutation_pair(first, second) ? 1 : 0;
    out.push_back(std::move(ex));
  }
  shuffle(out, rng);
  return out;
}

}  // namespace

Dataset gen_bracket_task(std::size_t n_train, std::size_t n_val, std::size_t n_test,
                         std::size_t seq_len, double imbalance, Rng& rng) {
  if (seq_len == 0 || seq_len % 2 != 0) {
    throw ConfigError("bracket task: seq_len must be positive and even");
  }
  if (!(imbalance > 0.0) || !(imbalance < 1.0)) {
    throw ConfigError("bracket task: imbalance must be in (0, 1)");
  }
  Dataset d;
  d.train = make_bracket_examples(n_train, seq_len, imbalance, rng);
  d.val = make_bracket_examples(n_val, seq_len, imbalance, rng);
  d.test = make_bracket_examples(n_test, seq_len, imbalance, rng);
  return d;
}

Dataset gen_pair_task(std::size_t n_train, std::size_t n_val, std::size_t n_test,
                      std::size_t seq_len, std::size_t vocab_size, Rng& rng) {
  if (seq_len < 3) throw ConfigError("pair task: seq_len must be at least 3");
  if (vocab_size < tok::kWordBase + 2) {
    throw ConfigError("pair task: vocab too small for word tokens");
  }
  const std::size_t seg_len = (seq_len - 1) / 2;
  Dataset d;
  d.train = make_pair_examples(n_train, seg_len, vocab_size, rng);
  d.val = make_pair_examples(n_val, seg_len, vocab_size, rng);
  d.test = make_pair_examples(n_test, seg_len, vocab_size, rng);
  return d;
}

double mcc(const ConfusionCounts& c) {
  const double tp = static_cast<double>(c.tp);
  const double tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn);
  const double f1 = tp + fp, f2 = tp + fn, f3 = tn + fp, f4 = tn + fn;
  if (f1 == 0.0 || f2 == 0.0 || f3 == 0.0 || f4 == 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(f1 * f2 * f3 * f4);
}

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size()) {
    throw ShapeError("accuracy: " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

EvalMetrics evaluate(const Model& model, const std::vector<Example>& examples,
                     std::size_t batch_size) {
  EvalMetrics m;
  std::vector<int> preds, labels;
  preds.reserve(examples.size());
  labels.reserve(examples.size());
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    Batch batch;
    for (std::size_t i = start; i < end; ++i) {
      batch.tokens.push_back(examples[i].tokens);
      batch.labels.push_back(examples[i].label);
    }
    const ForwardResult fwd = forward(model, batch, RunMode::kEval);
    for (std::size_t j = 0; j < fwd.logits.cols(); ++j) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < fwd.logits.rows(); ++i) {
        if (fwd.logits(i, j) > fwd.logits(best, j)) best = i;
      }
      preds.push_back(static_cast<int>(best));
      labels.push_back(batch.labels[j]);
    }
  }
  m.count = preds.size();
  m.accuracy = accuracy(preds, labels);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] == 1) {
      preds[i] == 1 ? ++m.confusion.tp : ++m.confusion.fn;
    } else {
      preds[i] == 1 ? ++m.confusion.fp : ++m.confusion.tn;
    }
  }
  m.mcc = mcc(m.confusion);
  return m;
}

void export_examples(std::ostream& os, const std::vector<Example>& examples) {
  for (const auto& ex : examples) {
    nlohmann::json rec;
    rec["label"] = ex.label;
    rec["tokens"] = ex.tokens;
    os << rec.dump() << "\n";
  }
}

std::vector<Example> import_examples(std::istream& is) {
  std::vector<Example> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    Example ex;
    ex.label = rec.at("label").get<int>();
    ex.tokens = rec.at("tokens").get<std::vector<int>>();
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace mtadapt
