#pragma once

// Desk-scale constructive checks of the transformer theory behind the
// tracer: near-orthogonal embedding sampling with a calibrated dimension
// recipe, hand-built pair-detector blocks, a multi-layer subsequence
// embedder, logit decomposition into association times attention weight,
// and the linear-attention gradient bound.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "subtrace/rng.hpp"
#include "subtrace/seq.hpp"

namespace subtrace {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Near-orthogonal embeddings

// Calibrated once against the sampling check below and frozen: with
// d = ceil(kOrthoC * ln(max(N*eps, 2)) / eps^2) the pairwise tail bound
// 2*exp(-d*eps^2/2) stays below 1e-9 for N = 1000, eps = 0.2, so a full
// 1000-vector draw succeeds with probability about 0.9994 per seed.
inline constexpr double kOrthoC = 8.0;
inline constexpr double kOrthoArgFloor = 2.0;

inline int required_dimension(int n_vectors, double epsilon) {
  if (n_vectors < 2) throw std::invalid_argument("required_dimension: N must be >= 2");
  if (epsilon <= 0 || epsilon >= 1)
    throw std::invalid_argument("required_dimension: epsilon must lie in (0,1)");
  const double arg = std::max(static_cast<double>(n_vectors) * epsilon, kOrthoArgFloor);
  return static_cast<int>(std::ceil(kOrthoC * std::log(arg) / (epsilon * epsilon)));
}

struct OrthoSample {
  Eigen::MatrixXf vectors;  // N x d, unit rows
  double max_abs_dot = 0;
  bool ok = false;
};

// N independent uniform unit vectors (normalized Gaussians), deterministic
// per seed. ok reports whether all pairwise |dot| stay below epsilon.
inline OrthoSample sample_near_orthogonal(int n_vectors, int d, double epsilon,
                                          std::uint64_t seed) {
  if (n_vectors < 1 || d < 1)
    throw std::invalid_argument("sample_near_orthogonal: N and d must be >= 1");
  OrthoSample out;
  out.vectors.resize(n_vectors, d);
  Rng rng(seed);
  for (int i = 0; i < n_vectors; ++i) {
    double norm2 = 0;
    for (int j = 0; j < d; ++j) {
      const double g = rng.next_gaussian();
      out.vectors(i, j) = static_cast<float>(g);
      norm2 += g * g;
    }
    out.vectors.row(i) /= static_cast<float>(std::sqrt(norm2));
  }
  Eigen::MatrixXf gram = out.vectors * out.vectors.transpose();
  float max_abs = 0;
  for (int i = 0; i < n_vectors; ++i)
    for (int j = i + 1; j < n_vectors; ++j)
      max_abs = std::max(max_abs, std::abs(gram(i, j)));
  out.max_abs_dot = max_abs;
  out.ok = out.max_abs_dot < epsilon;
  return out;
}

// ---------------------------------------------------------------------------
// Hand-built attention blocks

struct AttnHead {
  Mat w_kq;
  Mat w_ov;
};

struct LayerWeights {
  std::vector<AttnHead> heads;
  Mat w_f1;  // d_f x (H*d)
  Vec b;     // d_f
  Mat w_f2;  // d x d_f
  double gamma = 0;

  std::size_t dim() const { return heads.empty() ? 0 : static_cast<std::size_t>(heads[0].w_kq.rows()); }

  void validate() const {
    if (heads.empty()) throw std::invalid_argument("LayerWeights: needs at least one head");
    const auto d = heads[0].w_kq.rows();
    for (const auto& h : heads) {
      if (h.w_kq.rows() != d || h.w_kq.cols() != d || h.w_ov.rows() != d || h.w_ov.cols() != d)
        throw std::invalid_argument("LayerWeights: head matrices must all be d x d");
    }
    const auto hd = static_cast<Eigen::Index>(heads.size()) * d;
    if (w_f1.rows() != b.size() || w_f2.cols() != w_f1.rows())
      throw std::invalid_argument("LayerWeights: FFN shapes inconsistent");
    if (w_f1.rows() > 0 && (w_f1.cols() != hd || w_f2.rows() != d))
      throw std::invalid_argument("LayerWeights: FFN width inconsistent with heads");
  }
};

namespace detail {

inline Vec softmax(const Vec& scores) {
  const double m = scores.maxCoeff();
  Vec e = (scores.array() - m).exp();
  return e / e.sum();
}

}  // namespace detail

// Concatenated per-head attention outputs, causal: position t attends over
// positions 0..t. Features are rows of an n x d matrix.
inline Mat mha_concat(const LayerWeights& layer, const Mat& features) {
  layer.validate();
  const Eigen::Index n = features.rows();
  const Eigen::Index d = features.cols();
  if (static_cast<std::size_t>(d) != layer.dim())
    throw std::invalid_argument("mha_concat: feature dim mismatch");
  const Eigen::Index heads = static_cast<Eigen::Index>(layer.heads.size());
  Mat out(n, heads * d);
  for (Eigen::Index t = 0; t < n; ++t) {
    const Vec query = features.row(t).transpose();
    const auto prefix = features.topRows(t + 1);
    for (Eigen::Index h = 0; h < heads; ++h) {
      Vec scores = prefix * (layer.heads[h].w_kq * query);
      Vec weights = detail::softmax(scores);
      Vec attended = layer.heads[h].w_ov * (prefix.transpose() * weights);
      out.block(t, h * d, 1, d) = attended.transpose();
    }
  }
  return out;
}

// Hidden FFN activations: ReLU(W_F1 * concat - b), one row per position.
inline Mat ffn_hidden(const LayerWeights& layer, const Mat& features) {
  Mat concat = mha_concat(layer, features);
  if (layer.w_f1.rows() == 0) return Mat::Zero(features.rows(), 0);
  Mat pre = concat * layer.w_f1.transpose();
  pre.rowwise() -= layer.b.transpose();
  return pre.cwiseMax(0.0);
}

// Full block with residual: features + W_F2 * ReLU(W_F1 * MHA - b).
inline Mat forward_block(const LayerWeights& layer, const Mat& features) {
  Mat hidden = ffn_hidden(layer, features);
  if (hidden.cols() == 0) return features;
  return features + hidden * layer.w_f2.transpose();
}

// Two-head pair detector for "first_vec occurs strictly before an
// occurrence of second_vec": head 1 keys on first_vec from a second_vec
// query, head 2 copies the current token. The single FFN hidden unit fires
// only when both heads return their expected vectors. Head 2 carries the
// same sharpness gamma as head 1; with an identity-scaled key-query matrix
// at gamma the self-copy softmax concentrates hard enough for the 0.99 /
// 0.01 margins, which a plain identity does not.
inline LayerWeights build_pair_detector(const Vec& first_vec, const Vec& second_vec,
                                        double gamma, const Vec& out_vec) {
  if (gamma <= 0) throw std::invalid_argument("build_pair_detector: gamma must be > 0");
  const double tol = 1e-6;
  for (const Vec* v : {&first_vec, &second_vec, &out_vec}) {
    if (std::abs(v->norm() - 1.0) > tol)
      throw std::invalid_argument("build_pair_detector: embeddings must be unit vectors");
  }
  const Eigen::Index d = first_vec.size();
  if (second_vec.size() != d || out_vec.size() != d)
    throw std::invalid_argument("build_pair_detector: dimension mismatch");

  LayerWeights layer;
  layer.gamma = gamma;
  layer.heads.resize(2);
  layer.heads[0].w_kq = gamma * first_vec * second_vec.transpose();
  layer.heads[0].w_ov = Mat::Identity(d, d);
  layer.heads[1].w_kq = gamma * Mat::Identity(d, d);
  layer.heads[1].w_ov = Mat::Identity(d, d);
  layer.w_f1 = Mat::Zero(1, 2 * d);
  layer.w_f1.block(0, 0, 1, d) = first_vec.transpose();
  layer.w_f1.block(0, d, 1, d) = second_vec.transpose();
  layer.b = Vec::Ones(1);
  layer.w_f2 = out_vec;
  return layer;
}

// Per-position hidden activation of a detector layer (the scalar before
// the out_vec write).
inline Vec detector_activations(const LayerWeights& layer, const Mat& features) {
  Mat hidden = ffn_hidden(layer, features);
  if (hidden.cols() != 1)
    throw std::invalid_argument("detector_activations: layer has no single hidden unit");
  return hidden.col(0);
}

// ---------------------------------------------------------------------------
// Multi-layer subsequence embedder

// Split rule: the left part takes ceil(len/2) tokens, so every part of
// length lambda is assembled by layer ceil(log2(lambda)).
inline std::pair<SubSeq, SubSeq> split_pattern(const SubSeq& pattern) {
  if (pattern.size() < 2) throw std::invalid_argument("split_pattern: length must be >= 2");
  const std::size_t left_len = (pattern.size() + 1) / 2;
  return {SubSeq(pattern.begin(), pattern.begin() + static_cast<std::ptrdiff_t>(left_len)),
          SubSeq(pattern.begin() + static_cast<std::ptrdiff_t>(left_len), pattern.end())};
}

inline std::size_t assembly_layer(std::size_t len) {
  std::size_t layer = 0;
  std::size_t reach = 1;
  while (reach < len) {
    reach *= 2;
    ++layer;
  }
  return layer;  // ceil(log2(len)); 0 for single tokens
}

// All multi-token parts (the patterns themselves plus recursive split
// parts) that need their own embedding vector.
inline std::set<SubSeq> collect_parts(const std::vector<SubSeq>& patterns) {
  std::set<SubSeq> parts;
  std::vector<SubSeq> stack(patterns.begin(), patterns.end());
  while (!stack.empty()) {
    SubSeq p = std::move(stack.back());
    stack.pop_back();
    if (p.size() < 2) continue;
    if (!parts.insert(p).second) continue;
    auto [left, right] = split_pattern(p);
    stack.push_back(std::move(left));
    stack.push_back(std::move(right));
  }
  return parts;
}

struct SubseqEmbedder {
  std::vector<LayerWeights> layers;
  std::map<TokenId, Vec> token_embedding;
  std::map<SubSeq, Vec> part_embedding;
  // FFN hidden-unit index of each detected part, per layer.
  std::vector<std::vector<SubSeq>> detections_per_layer;

  const Vec& part_vec(const SubSeq& part) const {
    if (part.size() == 1) {
      auto it = token_embedding.find(part[0]);
      if (it == token_embedding.end())
        throw std::invalid_argument("SubseqEmbedder: token without embedding");
      return it->second;
    }
    auto it = part_embedding.find(part);
    if (it == part_embedding.end())
      throw std::invalid_argument("SubseqEmbedder: part without embedding");
    return it->second;
  }
};

inline constexpr std::size_t kMaxPatternLen = 8;
inline constexpr std::size_t kMaxPatternCount = 64;

// Blocks wired per the recursive-split induction: block l detects the
// (left part, right part) pairs of every part assembled at layer l and
// writes that part's embedding through the FFN; the residual path keeps
// all lower-order features. A trailing pass-through block pads the stack
// to ceil(log2(max_len)) + 1 blocks.
inline SubseqEmbedder build_subseq_embedder(const std::vector<SubSeq>& patterns,
                                            std::map<TokenId, Vec> token_embedding,
                                            std::map<SubSeq, Vec> part_embedding,
                                            double gamma = 50.0) {
  if (patterns.empty()) throw std::invalid_argument("build_subseq_embedder: no patterns");
  if (patterns.size() > kMaxPatternCount)
    throw std::invalid_argument("build_subseq_embedder: too many patterns");
  if (token_embedding.empty())
    throw std::invalid_argument("build_subseq_embedder: no token embeddings");

  std::size_t max_len = 0;
  for (const auto& p : patterns) {
    if (p.size() < 2) throw std::invalid_argument("build_subseq_embedder: patterns need length >= 2");
    if (p.size() > kMaxPatternLen)
      throw std::invalid_argument("build_subseq_embedder: pattern longer than supported cap");
    max_len = std::max(max_len, p.size());
  }

  SubseqEmbedder net;
  net.token_embedding = std::move(token_embedding);
  net.part_embedding = std::move(part_embedding);

  const Eigen::Index d = net.token_embedding.begin()->second.size();
  const double tol = 1e-6;
  for (const auto& [tok, v] : net.token_embedding) {
    if (v.size() != d || std::abs(v.norm() - 1.0) > tol)
      throw std::invalid_argument("build_subseq_embedder: token embeddings must be unit, same dim");
  }
  auto parts = collect_parts(patterns);
  for (const auto& part : parts) {
    auto it = net.part_embedding.find(part);
    if (it == net.part_embedding.end())
      throw std::invalid_argument("build_subseq_embedder: embedding budget insufficient (missing part)");
    if (it->second.size() != d || std::abs(it->second.norm() - 1.0) > tol)
      throw std::invalid_argument("build_subseq_embedder: part embeddings must be unit, same dim");
  }

  const std::size_t detect_layers = assembly_layer(max_len);
  net.detections_per_layer.assign(detect_layers + 1, {});
  for (std::size_t l = 1; l <= detect_layers; ++l) {
    std::vector<SubSeq> assembled;
    for (const auto& part : parts)
      if (assembly_layer(part.size()) == l) assembled.push_back(part);

    LayerWeights layer;
    layer.gamma = gamma;
    if (assembled.empty()) {
      // Pass-through: one inert head, no FFN.
      layer.heads.resize(1);
      layer.heads[0].w_kq = Mat::Zero(d, d);
      layer.heads[0].w_ov = Mat::Zero(d, d);
      layer.w_f1 = Mat(0, d);
      layer.b = Vec(0);
      layer.w_f2 = Mat(d, 0);
    } else {
      const std::size_t units = assembled.size();
      layer.heads.resize(2 * units);
      layer.w_f1 = Mat::Zero(static_cast<Eigen::Index>(units),
                             static_cast<Eigen::Index>(2 * units) * d);
      layer.b = Vec::Ones(static_cast<Eigen::Index>(units));
      layer.w_f2 = Mat::Zero(d, static_cast<Eigen::Index>(units));
      for (std::size_t u = 0; u < units; ++u) {
        auto [left, right] = split_pattern(assembled[u]);
        const Vec& lv = net.part_vec(left);
        const Vec& rv = net.part_vec(right);
        layer.heads[2 * u].w_kq = gamma * lv * rv.transpose();
        layer.heads[2 * u].w_ov = Mat::Identity(d, d);
        layer.heads[2 * u + 1].w_kq = gamma * Mat::Identity(d, d);
        layer.heads[2 * u + 1].w_ov = Mat::Identity(d, d);
        const auto ui = static_cast<Eigen::Index>(u);
        layer.w_f1.block(ui, static_cast<Eigen::Index>(2 * u) * d, 1, d) = lv.transpose();
        layer.w_f1.block(ui, static_cast<Eigen::Index>(2 * u + 1) * d, 1, d) = rv.transpose();
        layer.w_f2.col(ui) = net.part_vec(assembled[u]);
      }
    }
    net.layers.push_back(std::move(layer));
    net.detections_per_layer[l] = std::move(assembled);
  }

  // Trailing identity block keeps the stack depth at ceil(log2 eta) + 1.
  LayerWeights tail;
  tail.gamma = gamma;
  tail.heads.resize(1);
  tail.heads[0].w_kq = Mat::Zero(d, d);
  tail.heads[0].w_ov = Mat::Zero(d, d);
  tail.w_f1 = Mat(0, d);
  tail.b = Vec(0);
  tail.w_f2 = Mat(d, 0);
  net.layers.push_back(std::move(tail));
  return net;
}

// Runs all blocks over a token sequence; row t is the final feature of
// position t.
inline Mat encode_sequence(const SubseqEmbedder& net, const TokenSeq& seq) {
  if (seq.empty()) throw std::invalid_argument("encode_sequence: empty sequence");
  const Eigen::Index d = net.token_embedding.begin()->second.size();
  Mat features(static_cast<Eigen::Index>(seq.size()), d);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    auto it = net.token_embedding.find(seq[t]);
    if (it == net.token_embedding.end())
      throw std::invalid_argument("encode_sequence: token without embedding");
    features.row(static_cast<Eigen::Index>(t)) = it->second.transpose();
  }
  for (const auto& layer : net.layers) features = forward_block(layer, features);
  return features;
}

// ---------------------------------------------------------------------------
// Feature and logit decomposition

struct DecompositionTerm {
  SubSeq pattern;
  double coefficient = 0;
};

struct FeatureDecomposition {
  std::vector<DecompositionTerm> coefficients;
  double residual = 0;  // relative norm of the unexplained part
};

// Least-squares projection of one feature vector onto the dictionary
// embeddings.
inline FeatureDecomposition feature_decomposition_check(
    const Vec& feature, const std::vector<std::pair<SubSeq, Vec>>& dictionary) {
  if (dictionary.empty())
    throw std::invalid_argument("feature_decomposition_check: empty dictionary");
  const Eigen::Index d = feature.size();
  Mat dict(d, static_cast<Eigen::Index>(dictionary.size()));
  for (std::size_t k = 0; k < dictionary.size(); ++k) {
    if (dictionary[k].second.size() != d)
      throw std::invalid_argument("feature_decomposition_check: dimension mismatch");
    dict.col(static_cast<Eigen::Index>(k)) = dictionary[k].second;
  }
  Vec coef = dict.colPivHouseholderQr().solve(feature);
  FeatureDecomposition out;
  for (std::size_t k = 0; k < dictionary.size(); ++k)
    out.coefficients.push_back({dictionary[k].first, coef(static_cast<Eigen::Index>(k))});
  const double fn = feature.norm();
  out.residual = fn > 0 ? (feature - dict * coef).norm() / fn : 0.0;
  return out;
}

struct LogitTerm {
  SubSeq pattern;
  double psi_hat = 0;  // phi(y)^T W_OV phi(pattern)
  double omega = 0;    // attention-weight factor accumulated over positions
};

struct LogitDecomposition {
  std::vector<LogitTerm> terms;
  double f = 0;  // the model logit
  double reconstruction_gap = 0;
};

// Decomposes f(s, y) = sum_t (phi(y)^T W_OV phi_t)(phi_t^T W_KQ phi_n)
// through per-position least squares on the dictionary: each position's
// feature is expanded in dictionary patterns, psi_hat is the per-pattern
// association weight and omega collects that pattern's attention factor.
// omega is one consistent instantiation of the scaling value: the
// coefficient-weighted sum of the positions' key-query scores.
inline LogitDecomposition logit_decomposition(
    const Mat& features, const Mat& w_ov, const Mat& w_kq, const Vec& y_vec,
    const std::vector<std::pair<SubSeq, Vec>>& dictionary) {
  if (dictionary.empty()) throw std::invalid_argument("logit_decomposition: empty dictionary");
  const Eigen::Index n = features.rows();
  const Eigen::Index d = features.cols();
  if (w_ov.rows() != d || w_ov.cols() != d || w_kq.rows() != d || w_kq.cols() != d ||
      y_vec.size() != d)
    throw std::invalid_argument("logit_decomposition: dimension mismatch");

  const Vec query = features.row(n - 1).transpose();
  const Vec kq_query = w_kq * query;

  LogitDecomposition out;
  out.f = y_vec.transpose() * w_ov * features.transpose() * features * w_kq * query;

  Mat dict(d, static_cast<Eigen::Index>(dictionary.size()));
  for (std::size_t k = 0; k < dictionary.size(); ++k)
    dict.col(static_cast<Eigen::Index>(k)) = dictionary[k].second;
  auto qr = dict.colPivHouseholderQr();

  out.terms.resize(dictionary.size());
  for (std::size_t k = 0; k < dictionary.size(); ++k) {
    out.terms[k].pattern = dictionary[k].first;
    out.terms[k].psi_hat = y_vec.transpose() * w_ov * dictionary[k].second;
  }
  for (Eigen::Index t = 0; t < n; ++t) {
    const Vec phi_t = features.row(t).transpose();
    const Vec coef = qr.solve(phi_t);
    const double score = phi_t.dot(kq_query);
    for (std::size_t k = 0; k < dictionary.size(); ++k)
      out.terms[k].omega += coef(static_cast<Eigen::Index>(k)) * score;
  }

  double recon = 0;
  for (const auto& term : out.terms) recon += term.psi_hat * term.omega;
  const double denom = std::abs(out.f);
  out.reconstruction_gap =
      denom > 0 ? std::abs(out.f - recon) / denom : std::abs(out.f - recon);
  return out;
}

// ---------------------------------------------------------------------------
// Linear-attention gradient bound

struct LinAttnModel {
  std::map<TokenId, Vec> phi;  // unit token embeddings
  Mat w_kq;
  Mat w_ov;
  TokenId end_token = 0;
  std::size_t tau_dp = 1;  // maximum per-token duplication in any sequence
};

using LabeledSeq = std::pair<TokenSeq, TokenId>;

namespace detail {

inline const Vec& token_vec(const LinAttnModel& model, TokenId t) {
  auto it = model.phi.find(t);
  if (it == model.phi.end())
    throw std::invalid_argument("linear-attention model: token without embedding");
  return it->second;
}

// f(s, y) = phi(y)^T W_OV Phi^T Phi W_KQ phi(end); one-layer token features.
inline double lin_attn_logit(const LinAttnModel& model, const TokenSeq& s, TokenId y) {
  const Vec kq = model.w_kq * token_vec(model, model.end_token);
  const Vec yv = model.w_ov.transpose() * token_vec(model, y);
  double f = 0;
  for (TokenId tok : s) {
    const Vec& ft = token_vec(model, tok);
    f += yv.dot(ft) * ft.dot(kq);
  }
  return f;
}

inline std::vector<double> lin_attn_probs(const LinAttnModel& model, const TokenSeq& s,
                                          const std::vector<TokenId>& vocab) {
  std::vector<double> logits;
  logits.reserve(vocab.size());
  for (TokenId y : vocab) logits.push_back(lin_attn_logit(model, s, y));
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double& l : logits) {
    l = std::exp(l - m);
    z += l;
  }
  for (double& l : logits) l /= z;
  return logits;
}

// Number of positions t where the pattern is a subsequence of s[0..t]
// ending exactly at t.
inline std::size_t ending_occurrences(const SubSeq& pattern, const TokenSeq& s) {
  if (pattern.empty()) return 0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < s.size(); ++t) {
    if (s[t] != pattern.back()) continue;
    SubSeq head(pattern.begin(), pattern.end() - 1);
    TokenSeq prefix(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(t));
    if (is_subsequence(head, prefix)) ++count;
  }
  return count;
}

inline void validate_gradient_dataset(const LinAttnModel& model,
                                      const std::vector<LabeledSeq>& dataset) {
  if (dataset.empty()) throw std::invalid_argument("gradient check: empty dataset");
  for (const auto& [s, y] : dataset) {
    if (s.empty() || s.back() != model.end_token)
      throw std::invalid_argument("gradient check: every sequence must end with the end token");
    std::map<TokenId, std::size_t> dup;
    for (TokenId t : s) {
      if (++dup[t] > model.tau_dp)
        throw std::invalid_argument("gradient check: per-token duplication exceeds tau_dp");
    }
    (void)y;
  }
}

inline std::vector<TokenId> model_vocab(const LinAttnModel& model) {
  std::vector<TokenId> vocab;
  vocab.reserve(model.phi.size());
  for (const auto& [t, v] : model.phi) {
    vocab.push_back(t);
    (void)v;
  }
  return vocab;
}

}  // namespace detail

struct GradientBoundResult {
  double delta_ov = 0;  // analytic association-side gradient term
  double delta_kq = 0;  // analytic attention-side gradient term
  double lhs = 0;       // |delta_ov| + |delta_kq|
  double rhs = 0;       // tau_dp (||W_OV|| + ||W_KQ||) P(contained) |gap|
  double p_contained = 0;
  double gap = 0;  // mean predicted prob minus empirical conditional
  bool holds = false;
};

// Both gradient terms are exact finite sums over the dataset; the bound
// side replaces the occurrence-weighted averages with plain containment
// averages and pays the tau_dp factor for it.
inline GradientBoundResult gradient_bound_check(const LinAttnModel& model,
                                                const std::vector<LabeledSeq>& dataset,
                                                const SubSeq& pattern, TokenId y,
                                                const Vec* pattern_embedding = nullptr) {
  detail::validate_gradient_dataset(model, dataset);
  if (pattern.empty()) throw std::invalid_argument("gradient check: empty pattern");
  Vec pat_vec;
  if (pattern_embedding) {
    pat_vec = *pattern_embedding;
  } else if (pattern.size() == 1) {
    pat_vec = detail::token_vec(model, pattern[0]);
  } else {
    throw std::invalid_argument(
        "gradient check: multi-token patterns need an explicit pattern embedding");
  }

  const auto vocab = detail::model_vocab(model);
  std::size_t y_index = vocab.size();
  for (std::size_t i = 0; i < vocab.size(); ++i)
    if (vocab[i] == y) y_index = i;
  if (y_index == vocab.size())
    throw std::invalid_argument("gradient check: y outside the model vocabulary");

  const double kappa_ov = pat_vec.dot(model.w_kq * detail::token_vec(model, model.end_token));
  const double kappa_kq = detail::token_vec(model, y).dot(model.w_ov * pat_vec);

  GradientBoundResult res;
  double sum_ov = 0, sum_kq = 0;
  std::size_t n_contained = 0, n_label = 0;
  double sum_phat = 0;
  for (const auto& [s, label] : dataset) {
    const auto probs = detail::lin_attn_probs(model, s, vocab);
    const double phat_y = probs[y_index];
    const double err = phat_y - (label == y ? 1.0 : 0.0);
    const auto m = static_cast<double>(detail::ending_occurrences(pattern, s));
    sum_ov += m * err * kappa_ov;
    sum_kq += m * err * kappa_kq;
    if (is_subsequence(pattern, s)) {
      ++n_contained;
      sum_phat += phat_y;
      if (label == y) ++n_label;
    }
  }
  const double n = static_cast<double>(dataset.size());
  res.delta_ov = sum_ov / n;
  res.delta_kq = sum_kq / n;
  res.lhs = std::abs(res.delta_ov) + std::abs(res.delta_kq);
  res.p_contained = static_cast<double>(n_contained) / n;
  if (n_contained > 0) {
    res.gap = sum_phat / static_cast<double>(n_contained) -
              static_cast<double>(n_label) / static_cast<double>(n_contained);
  }
  Eigen::JacobiSVD<Mat> svd_ov(model.w_ov);
  Eigen::JacobiSVD<Mat> svd_kq(model.w_kq);
  const double norms = svd_ov.singularValues()(0) + svd_kq.singularValues()(0);
  res.rhs = static_cast<double>(model.tau_dp) * norms * res.p_contained * std::abs(res.gap);
  res.holds = res.lhs <= res.rhs * (1.0 + 1e-9) + 1e-12;
  return res;
}

enum class GradientTerm { kAssociation, kAttention };

// Central-difference estimate of the same gradient term: the loss is
// evaluated with the logit f(s, y) shifted by theta * m(s) * kappa, the
// exact perturbation whose derivative at zero is the analytic term.
inline double finite_diff_gradient_term(const LinAttnModel& model,
                                        const std::vector<LabeledSeq>& dataset,
                                        const SubSeq& pattern, TokenId y, GradientTerm which,
                                        const Vec* pattern_embedding = nullptr,
                                        double step = 1e-4) {
  detail::validate_gradient_dataset(model, dataset);
  Vec pat_vec;
  if (pattern_embedding) pat_vec = *pattern_embedding;
  else if (pattern.size() == 1) pat_vec = detail::token_vec(model, pattern[0]);
  else throw std::invalid_argument("finite diff: multi-token patterns need an embedding");

  const double kappa =
      which == GradientTerm::kAssociation
          ? pat_vec.dot(model.w_kq * detail::token_vec(model, model.end_token))
          : detail::token_vec(model, y).dot(model.w_ov * pat_vec);
  const auto vocab = detail::model_vocab(model);

  auto loss_at = [&](double theta) {
    double loss = 0;
    for (const auto& [s, label] : dataset) {
      const auto m = static_cast<double>(detail::ending_occurrences(pattern, s));
      std::vector<double> logits;
      logits.reserve(vocab.size());
      double label_logit = 0;
      for (TokenId yy : vocab) {
        double f = detail::lin_attn_logit(model, s, yy);
        if (yy == y) f += theta * m * kappa;
        logits.push_back(f);
        if (yy == label) label_logit = f;
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0;
      for (double l : logits) z += std::exp(l - mx);
      loss += -(label_logit - mx - std::log(z));
    }
    return loss / static_cast<double>(dataset.size());
  };
  return (loss_at(step) - loss_at(-step)) / (2 * step);
}

}  // namespace subtrace
