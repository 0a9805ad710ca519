#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "uniseg/rng.hpp"
#include "uniseg/tensor.hpp"
#include "uniseg/volume.hpp"

namespace uniseg {

// ---- class embeddings -----------------------------------------------------

/// Fixed language embeddings w_cls, keyed by class index. All vectors in a
/// store share one dimension.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  EmbeddingStore(int dim, std::string source);

  int dim() const { return dim_; }
  const std::string& source() const { return source_; }
  std::size_t size() const { return vectors_.size(); }
  bool contains(int cls) const { return vectors_.count(cls) != 0; }
  std::vector<int> classes() const;

  /// Throws EmbeddingDimMismatch on a wrong length, InvalidArgument on
  /// non-finite entries. Replaces an existing vector.
  void set(int cls, std::vector<double> vec);
  /// Throws MissingEmbedding.
  const std::vector<double>& get(int cls) const;
  /// Adds the other store's vectors (dims must agree; other wins on overlap).
  void merge(const EmbeddingStore& other);

  /// Identity rows: the k-th smallest class index gets e_k, dim = classes.size().
  static EmbeddingStore one_hot(const std::vector<int>& classes);

  friend bool operator==(const EmbeddingStore&, const EmbeddingStore&) = default;

 private:
  int dim_ = 0;
  std::string source_;
  std::map<int, std::vector<double>> vectors_;
};

/// `UEMB1 <dim> <source>` header, then `<class> <v1> ... <vD>` rows. A class
/// listed twice keeps its last row; each duplicate adds a message to
/// `warnings` when given.
EmbeddingStore load_embeddings(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr);
EmbeddingStore parse_embeddings(const std::string& text, const std::string& source_name,
                                std::vector<std::string>* warnings = nullptr);
/// Writes with 17 significant digits so a reload is bit-exact.
void save_embeddings(const std::filesystem::path& path, const EmbeddingStore& store);

// ---- class-specific head ----------------------------------------------------

/// Flattened theta layout for the three 1x1x1 conditional conv layers:
/// [w1 (8 x C) | b1 (8) | w2 (8 x 8) | b2 (8) | w3 (8) | b3 (1)].
struct HeadLayout {
  static constexpr int kHidden = 8;
  int in_channels = 8;

  std::size_t w1() const { return 0; }
  std::size_t b1() const { return w1() + static_cast<std::size_t>(kHidden) * in_channels; }
  std::size_t w2() const { return b1() + kHidden; }
  std::size_t b2() const { return w2() + kHidden * kHidden; }
  std::size_t w3() const { return b2() + kHidden; }
  std::size_t b3() const { return w3() + kHidden; }
  std::size_t size() const { return b3() + 1; }
};

struct HeadParams {
  HeadLayout layout;
  std::vector<double> theta;

  explicit HeadParams(HeadLayout l) : layout(l), theta(l.size(), 0.0) {}
  HeadParams(HeadLayout l, std::vector<double> t);
};

/// P = sigmoid(phi(phi(F * theta1) * theta2) * theta3), one probability per
/// voxel; phi is LeakyReLU(0.01).
ProbMap head_forward(const Tensor4& features, const HeadParams& head);

/// Pre-sigmoid output z, with P = sigmoid(z).
Grid<double> head_logits(const Tensor4& features, const HeadParams& head);

/// Adjoint of head_forward. Returns dL/dtheta; adds dL/dF into
/// `grad_features` when non-null. The forward is recomputed per voxel.
std::vector<double> head_backward(const Tensor4& features, const HeadParams& head, const ProbMap& grad_prob,
                                  Tensor4* grad_features);
/// Same, starting from dL/dz.
std::vector<double> head_backward_logits(const Tensor4& features, const HeadParams& head,
                                         const Grid<double>& grad_logit, Tensor4* grad_features);

// ---- language-driven parameter generator -----------------------------------

/// Per-class affine map theta = W (w_cls (+) f) + b. The generator is a single
/// affine layer.
struct LpgMap {
  int out_dim = 0;    // len(theta)
  int text_dim = 0;   // D_text
  int image_dim = 0;  // C_last
  std::vector<double> weight;  // out_dim x (text_dim + image_dim), row-major
  std::vector<double> bias;    // out_dim

  LpgMap() = default;
  LpgMap(int out, int text, int image);

  int in_dim() const { return text_dim + image_dim; }
  std::size_t parameter_count() const { return weight.size() + bias.size(); }
  /// He-normal (fan-in = text_dim + image_dim), zero bias.
  void init_he(Rng& rng);
  LpgMap zeros_like() const;

  friend bool operator==(const LpgMap&, const LpgMap&) = default;
};

HeadParams generate_params(const std::vector<double>& embedding, const std::vector<double>& global,
                           const LpgMap& lpg, HeadLayout layout);

/// Adjoint of generate_params: grads += dL/dW, dL/db; returns dL/df.
std::vector<double> generate_params_backward(const std::vector<double>& embedding, const std::vector<double>& global,
                                             const LpgMap& lpg, const std::vector<double>& grad_theta,
                                             LpgMap& grads);

}  // namespace uniseg
