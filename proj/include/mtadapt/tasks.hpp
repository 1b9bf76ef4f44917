#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "mtadapt/model.hpp"
#include "mtadapt/rng.hpp"

namespace mtadapt {

/// Fixed token ids shared by the synthetic tasks.
namespace tok {
inline constexpr int kPad = 0;
inline constexpr int kOpenParen = 1;
inline constexpr int kCloseParen = 2;
inline constexpr int kOpenSquare = 3;
inline constexpr int kCloseSquare = 4;
inline constexpr int kSep = 5;
inline constexpr int kWordBase = 6;  // pair-task word ids start here
}  // namespace tok

struct Example {
  std::vector<int> tokens;
  int label = 0;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> test;
  std::size_t n_classes = 2;
};

struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
};

/// Bracket-validity classification (grammatical-acceptability stand-in).
/// Positives are balanced strings over two bracket types; negatives are
/// corrupted by one swap or substitution until the stack checker rejects
/// them. `imbalance` is the positive fraction; seq_len must be even.
Dataset gen_bracket_task(std::size_t n_train, std::size_t n_val, std::size_t n_test,
                         std::size_t seq_len, double imbalance, Rng& rng);

/// Sentence-pair task (paraphrase stand-in): label 1 iff the second segment
/// is a permutation of the first. Segments of (seq_len - 1) / 2 word tokens
/// around a separator; negatives substitute one token. Balanced classes.
Dataset gen_pair_task(std::size_t n_train, std::size_t n_val, std::size_t n_test,
                      std::size_t seq_len, std::size_t vocab_size, Rng& rng);

/// Matthews correlation coefficient; 0 by convention when any denominator
/// factor is zero.
double mcc(const ConfusionCounts& c);

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

struct EvalMetrics {
  double accuracy = 0.0;
  double mcc = 0.0;
  ConfusionCounts confusion;
  std::size_t count = 0;
};

/// Eval-mode forward over the examples (dropout off, adapters active unless
/// merged); argmax predictions.
EvalMetrics evaluate(const Model& model, const std::vector<Example>& examples,
                     std::size_t batch_size = 64);

// Line-delimited export/import of {tokens, label} records, for audits.
void export_examples(std::ostream& os, const std::vector<Example>& examples);
std::vector<Example> import_examples(std::istream& is);

}  // namespace mtadapt
