#include "uniseg/clipdriver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "uniseg/layers.hpp"

namespace uniseg {

// ---- embeddings -------------------------------------------------------------

EmbeddingStore::EmbeddingStore(int dim, std::string source) : dim_(dim), source_(std::move(source)) {
  if (dim < 1) throw Error(ErrorCode::InvalidArgument, "embedding dimension must be >= 1");
}

std::vector<int> EmbeddingStore::classes() const {
  std::vector<int> out;
  for (const auto& [k, v] : vectors_) out.push_back(k);
  return out;
}

void EmbeddingStore::set(int cls, std::vector<double> vec) {
  if (static_cast<int>(vec.size()) != dim_) {
    throw Error(ErrorCode::EmbeddingDimMismatch, "class " + std::to_string(cls) + ": expected dimension " +
                                                     std::to_string(dim_) + ", got " + std::to_string(vec.size()));
  }
  for (double v : vec)
    if (!std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "non-finite embedding entry");
  vectors_[cls] = std::move(vec);
}

const std::vector<double>& EmbeddingStore::get(int cls) const {
  auto it = vectors_.find(cls);
  if (it == vectors_.end()) throw Error(ErrorCode::MissingEmbedding, "no embedding for class " + std::to_string(cls));
  return it->second;
}

void EmbeddingStore::merge(const EmbeddingStore& other) {
  if (other.dim_ != dim_) {
    throw Error(ErrorCode::EmbeddingDimMismatch,
                "cannot merge embeddings of dimension " + std::to_string(other.dim_) + " into " + std::to_string(dim_));
  }
  for (const auto& [k, v] : other.vectors_) vectors_[k] = v;
}

EmbeddingStore EmbeddingStore::one_hot(const std::vector<int>& classes) {
  std::vector<int> sorted = classes;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  EmbeddingStore store(static_cast<int>(sorted.size()), "one-hot");
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    std::vector<double> v(sorted.size(), 0.0);
    v[k] = 1.0;
    store.set(sorted[k], std::move(v));
  }
  return store;
}

EmbeddingStore parse_embeddings(const std::string& text, const std::string& source_name,
                                std::vector<std::string>* warnings) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::optional<EmbeddingStore> store;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first) || first[0] == '#') continue;
    const std::string where = source_name + ":" + std::to_string(lineno);
    if (!store) {
      int dim = 0;
      std::string source;
      if (first != "UEMB1" || !(ls >> dim)) throw Error(ErrorCode::Parse, where + ": expected 'UEMB1 <dim> <source>'");
      std::getline(ls >> std::ws, source);
      store.emplace(dim, source.empty() ? "unknown" : source);
      continue;
    }
    int cls = 0;
    try {
      std::size_t used = 0;
      cls = std::stoi(first, &used);
      if (used != first.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw Error(ErrorCode::Parse, where + ": bad class index '" + first + "'");
    }
    std::vector<double> v;
    std::string tok;
    while (ls >> tok) {
      try {
        v.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw Error(ErrorCode::Parse, where + ": bad number '" + tok + "'");
      }
    }
    if (static_cast<int>(v.size()) != store->dim()) {
      throw Error(ErrorCode::EmbeddingDimMismatch, where + ": expected " + std::to_string(store->dim()) +
                                                       " values, got " + std::to_string(v.size()));
    }
    if (store->contains(cls)) {
      const std::string msg = where + ": duplicate row for class " + std::to_string(cls) + " (last row wins)";
      if (warnings) warnings->push_back(msg);
      std::cerr << "warning: " << msg << '\n';
    }
    store->set(cls, std::move(v));
  }
  if (!store) throw Error(ErrorCode::Parse, source_name + ": missing UEMB1 header");
  return *store;
}

EmbeddingStore load_embeddings(const std::filesystem::path& path, std::vector<std::string>* warnings) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_embeddings(ss.str(), path.string(), warnings);
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingStore& store) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "UEMB1 " << store.dim() << ' ' << store.source() << '\n';
  char buf[32];
  for (int cls : store.classes()) {
    out << cls;
    for (double v : store.get(cls)) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out << ' ' << buf;
    }
    out << '\n';
  }
}

// ---- head -------------------------------------------------------------------

HeadParams::HeadParams(HeadLayout l, std::vector<double> t) : layout(l), theta(std::move(t)) {
  if (theta.size() != layout.size()) {
    throw Error(ErrorCode::LpgDimMismatch, "head parameter vector has length " + std::to_string(theta.size()) +
                                               ", layout needs " + std::to_string(layout.size()));
  }
}

namespace {

constexpr int H = HeadLayout::kHidden;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct VoxelActivations {
  double a1[H];
  double a2[H];
  double z;
  double p;
};

void check_head_input(const Tensor4& features, const HeadParams& head) {
  if (features.shape().c != head.layout.in_channels) {
    throw Error(ErrorCode::ShapeMismatch, "head expects " + std::to_string(head.layout.in_channels) +
                                              " feature channels, got " + std::to_string(features.shape().c));
  }
  if (head.theta.size() != head.layout.size()) throw Error(ErrorCode::LpgDimMismatch, "theta length");
}

// Per-voxel three-layer MLP; `feat` is strided by `stride` across channels.
VoxelActivations eval_voxel(const double* feat, std::size_t stride, const HeadParams& head) {
  const HeadLayout& L = head.layout;
  const double* th = head.theta.data();
  const int C = L.in_channels;
  VoxelActivations a{};
  for (int j = 0; j < H; ++j) {
    double s = th[L.b1() + j];
    const double* w = th + L.w1() + static_cast<std::size_t>(j) * C;
    for (int c = 0; c < C; ++c) s += w[c] * feat[c * stride];
    a.a1[j] = nn::leaky_relu(s);
  }
  for (int j = 0; j < H; ++j) {
    double s = th[L.b2() + j];
    const double* w = th + L.w2() + static_cast<std::size_t>(j) * H;
    for (int k = 0; k < H; ++k) s += w[k] * a.a1[k];
    a.a2[j] = nn::leaky_relu(s);
  }
  double z = th[L.b3()];
  for (int k = 0; k < H; ++k) z += th[L.w3() + k] * a.a2[k];
  a.z = z;
  a.p = sigmoid(z);
  return a;
}

double act_grad(double activated) { return activated > 0.0 ? 1.0 : nn::kLeakySlope; }

}  // namespace

ProbMap head_forward(const Tensor4& features, const HeadParams& head) {
  check_head_input(features, head);
  const Shape4 s = features.shape();
  const std::size_t n = s.spatial();
  ProbMap out(s.dims());
  const double* base = features.channel(0);
  for (std::size_t v = 0; v < n; ++v) out[v] = eval_voxel(base + v, n, head).p;
  return out;
}

Grid<double> head_logits(const Tensor4& features, const HeadParams& head) {
  check_head_input(features, head);
  const Shape4 s = features.shape();
  const std::size_t n = s.spatial();
  Grid<double> out(s.dims());
  const double* base = features.channel(0);
  for (std::size_t v = 0; v < n; ++v) out[v] = eval_voxel(base + v, n, head).z;
  return out;
}

namespace {

std::vector<double> head_backward_impl(const Tensor4& features, const HeadParams& head, const Grid<double>& grad,
                                       bool grad_is_logit, Tensor4* grad_features) {
  check_head_input(features, head);
  const Shape4 s = features.shape();
  if (grad.dims() != s.dims()) throw Error(ErrorCode::GradShapeMismatch, "head gradient has the wrong shape");
  if (grad_features && !(grad_features->shape() == s)) {
    throw Error(ErrorCode::GradShapeMismatch, "grad_features has the wrong shape");
  }
  const HeadLayout& L = head.layout;
  const int C = L.in_channels;
  const double* th = head.theta.data();
  const std::size_t n = s.spatial();
  std::vector<double> g(L.size(), 0.0);
  const double* base = features.channel(0);
  double* gbase = grad_features ? grad_features->channel(0) : nullptr;
  for (std::size_t v = 0; v < n; ++v) {
    const double gp = grad[v];
    if (gp == 0.0) continue;
    const double* feat = base + v;
    const VoxelActivations a = eval_voxel(feat, n, head);
    const double dz = grad_is_logit ? gp : gp * a.p * (1.0 - a.p);
    g[L.b3()] += dz;
    double d2[H];
    for (int k = 0; k < H; ++k) {
      g[L.w3() + k] += dz * a.a2[k];
      d2[k] = dz * th[L.w3() + k] * act_grad(a.a2[k]);
    }
    double d1[H] = {};
    for (int j = 0; j < H; ++j) {
      g[L.b2() + j] += d2[j];
      const std::size_t row = L.w2() + static_cast<std::size_t>(j) * H;
      for (int k = 0; k < H; ++k) {
        g[row + k] += d2[j] * a.a1[k];
        d1[k] += d2[j] * th[row + k];
      }
    }
    for (int j = 0; j < H; ++j) {
      d1[j] *= act_grad(a.a1[j]);
      g[L.b1() + j] += d1[j];
      const std::size_t row = L.w1() + static_cast<std::size_t>(j) * C;
      for (int c = 0; c < C; ++c) {
        g[row + c] += d1[j] * feat[c * n];
        if (gbase) gbase[v + c * n] += d1[j] * th[row + c];
      }
    }
  }
  return g;
}

}  // namespace

std::vector<double> head_backward(const Tensor4& features, const HeadParams& head, const ProbMap& grad_prob,
                                  Tensor4* grad_features) {
  return head_backward_impl(features, head, grad_prob, false, grad_features);
}

std::vector<double> head_backward_logits(const Tensor4& features, const HeadParams& head,
                                         const Grid<double>& grad_logit, Tensor4* grad_features) {
  return head_backward_impl(features, head, grad_logit, true, grad_features);
}

// ---- LPG --------------------------------------------------------------------

LpgMap::LpgMap(int out, int text, int image)
    : out_dim(out), text_dim(text), image_dim(image),
      weight(static_cast<std::size_t>(out) * (text + image), 0.0), bias(out, 0.0) {
  if (out < 1 || text < 1 || image < 0) throw Error(ErrorCode::InvalidArgument, "bad LPG map dims");
}

void LpgMap::init_he(Rng& rng) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(in_dim()));
  for (auto& w : weight) w = std_dev * normal01(rng);
  std::fill(bias.begin(), bias.end(), 0.0);
}

LpgMap LpgMap::zeros_like() const { return LpgMap(out_dim, text_dim, image_dim); }

namespace {

void check_lpg(const std::vector<double>& embedding, const std::vector<double>& global, const LpgMap& lpg) {
  if (static_cast<int>(embedding.size()) != lpg.text_dim || static_cast<int>(global.size()) != lpg.image_dim) {
    throw Error(ErrorCode::LpgDimMismatch, "LPG expects (" + std::to_string(lpg.text_dim) + " + " +
                                               std::to_string(lpg.image_dim) + ") inputs, got (" +
                                               std::to_string(embedding.size()) + " + " +
                                               std::to_string(global.size()) + ")");
  }
}

}  // namespace

HeadParams generate_params(const std::vector<double>& embedding, const std::vector<double>& global,
                           const LpgMap& lpg, HeadLayout layout) {
  check_lpg(embedding, global, lpg);
  if (static_cast<std::size_t>(lpg.out_dim) != layout.size()) {
    throw Error(ErrorCode::LpgDimMismatch, "LPG output length does not match the head layout");
  }
  std::vector<double> theta(lpg.out_dim);
  const int in = lpg.in_dim();
  for (int r = 0; r < lpg.out_dim; ++r) {
    const double* w = lpg.weight.data() + static_cast<std::size_t>(r) * in;
    double s = lpg.bias[r];
    for (int k = 0; k < lpg.text_dim; ++k) s += w[k] * embedding[k];
    for (int k = 0; k < lpg.image_dim; ++k) s += w[lpg.text_dim + k] * global[k];
    theta[r] = s;
  }
  return HeadParams(layout, std::move(theta));
}

std::vector<double> generate_params_backward(const std::vector<double>& embedding, const std::vector<double>& global,
                                             const LpgMap& lpg, const std::vector<double>& grad_theta,
                                             LpgMap& grads) {
  check_lpg(embedding, global, lpg);
  if (static_cast<int>(grad_theta.size()) != lpg.out_dim || grads.weight.size() != lpg.weight.size()) {
    throw Error(ErrorCode::GradShapeMismatch, "LPG gradient buffers");
  }
  const int in = lpg.in_dim();
  std::vector<double> g_global(lpg.image_dim, 0.0);
  for (int r = 0; r < lpg.out_dim; ++r) {
    const double gr = grad_theta[r];
    grads.bias[r] += gr;
    double* gw = grads.weight.data() + static_cast<std::size_t>(r) * in;
    const double* w = lpg.weight.data() + static_cast<std::size_t>(r) * in;
    for (int k = 0; k < lpg.text_dim; ++k) gw[k] += gr * embedding[k];
    for (int k = 0; k < lpg.image_dim; ++k) {
      gw[lpg.text_dim + k] += gr * global[k];
      g_global[k] += gr * w[lpg.text_dim + k];
    }
  }
  return g_global;
}

}  // namespace uniseg
