#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "trace/corpus.hpp"
#include "trace/features.hpp"
#include "trace/predictor.hpp"
#include "trace/tensor_io.hpp"

namespace trace {

struct FfnnConfig {
  std::vector<std::size_t> hidden_dims{50};
  double lr = 0.5;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

/// Dense layer, weights row-major [out][in].
struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weight;
  std::vector<double> bias;
};

/// Fully connected ReLU network over TF-IDF unigram features with one logit
/// output. latent() is the activation vector of the last hidden layer.
class FeedForwardModel final : public Predictor {
 public:
  FeedForwardModel() = default;

  /// Random initialization: every parameter ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  FeedForwardModel(Vocabulary vocab, const std::vector<std::size_t>& hidden_dims, std::uint64_t seed)
      : vocab_(std::move(vocab)) {
    if (hidden_dims.empty() || hidden_dims.size() > 2) throw InputError("ffnn: need one or two hidden layers");
    for (auto h : hidden_dims) {
      if (h == 0) throw InputError("ffnn: hidden dims must be >= 1");
    }
    if (vocab_.size() == 0) throw InputError("ffnn: empty vocabulary");
    Rng rng(seed);
    std::size_t fan_in = vocab_.size();
    auto dims = hidden_dims;
    dims.push_back(1);
    for (auto out : dims) {
      DenseLayer layer{fan_in, out, std::vector<double>(fan_in * out), std::vector<double>(out)};
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& w : layer.weight) w = uniform_real(rng, -bound, bound);
      for (auto& b : layer.bias) b = uniform_real(rng, -bound, bound);
      layers_.push_back(std::move(layer));
      fan_in = out;
    }
  }

  FeedForwardModel(Vocabulary vocab, std::vector<DenseLayer> layers)
      : vocab_(std::move(vocab)), layers_(std::move(layers)) {
    check_shapes();
  }

  const Vocabulary& vocabulary() const { return vocab_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  std::vector<std::size_t> hidden_dims() const {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) out.push_back(layers_[l].out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  std::vector<double> flat_parameters() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& l : layers_) {
      out.insert(out.end(), l.weight.begin(), l.weight.end());
      out.insert(out.end(), l.bias.begin(), l.bias.end());
    }
    return out;
  }

  void set_flat_parameters(std::span<const double> p) {
    if (p.size() != parameter_count()) throw InputError("ffnn: parameter vector has wrong length");
    std::size_t at = 0;
    for (auto& l : layers_) {
      std::copy_n(p.begin() + static_cast<long>(at), l.weight.size(), l.weight.begin());
      at += l.weight.size();
      std::copy_n(p.begin() + static_cast<long>(at), l.bias.size(), l.bias.begin());
      at += l.bias.size();
    }
  }

  FeatureVector features(std::span<const std::string> tokens) const { return tfidf_vectorize(tokens, vocab_); }

  /// Forward pass; `acts` (optional) receives every hidden activation vector.
  double forward(const FeatureVector& x, std::vector<std::vector<double>>* acts = nullptr) const {
    std::vector<double> h(layers_[0].out);
    {
      const auto& l = layers_[0];
      for (std::size_t o = 0; o < l.out; ++o) {
        double s = l.bias[o];
        const double* row = &l.weight[o * l.in];
        for (std::size_t k = 0; k < x.indices.size(); ++k) s += row[x.indices[k]] * x.values[k];
        h[o] = s;
      }
    }
    for (std::size_t li = 1; li < layers_.size(); ++li) {
      for (auto& v : h) v = std::max(0.0, v);
      if (acts) acts->push_back(h);
      const auto& l = layers_[li];
      std::vector<double> next(l.out);
      for (std::size_t o = 0; o < l.out; ++o) {
        double s = l.bias[o];
        const double* row = &l.weight[o * l.in];
        for (std::size_t i = 0; i < l.in; ++i) s += row[i] * h[i];
        next[o] = s;
      }
      h.swap(next);
    }
    return h[0];
  }

  double log_odds(std::string_view text) const override { return log_odds_tokens(tokenize(text)); }

  double log_odds_tokens(std::span<const std::string> tokens) const override { return forward(features(tokens)); }

  std::size_t latent_dim() const override { return layers_[layers_.size() - 2].out; }

  std::vector<double> latent(std::string_view text) const override {
    std::vector<std::vector<double>> acts;
    forward(features(tokenize(text)), &acts);
    return acts.back();
  }

  std::string name() const override { return "ffnn"; }

  /// Mean logistic loss over (x, y).
  double loss(std::span<const FeatureVector> xs, std::span<const int> ys) const {
    double total = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double z = forward(xs[i]);
      total += softplus(z) - ys[i] * z;
    }
    return total / static_cast<double>(xs.size());
  }

  /// Gradient of loss() with respect to flat_parameters(), by backpropagation.
  std::vector<double> loss_gradient(std::span<const FeatureVector> xs, std::span<const int> ys) const {
    std::vector<DenseLayer> grad = zero_like();
    for (std::size_t i = 0; i < xs.size(); ++i) accumulate_gradient(xs[i], ys[i], grad);
    std::vector<double> flat;
    flat.reserve(parameter_count());
    const double inv_n = 1.0 / static_cast<double>(xs.size());
    for (const auto& l : grad) {
      for (double v : l.weight) flat.push_back(v * inv_n);
      for (double v : l.bias) flat.push_back(v * inv_n);
    }
    return flat;
  }

  // One SGD step on a mini-batch; returns the batch loss before the update.
  double sgd_step(std::span<const FeatureVector> xs, std::span<const int> ys, double lr) {
    std::vector<DenseLayer> grad = zero_like();
    double batch_loss = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) batch_loss += accumulate_gradient(xs[i], ys[i], grad);
    const double scale = lr / static_cast<double>(xs.size());
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      auto& l = layers_[li];
      for (std::size_t k = 0; k < l.weight.size(); ++k) l.weight[k] -= scale * grad[li].weight[k];
      for (std::size_t k = 0; k < l.bias.size(); ++k) l.bias[k] -= scale * grad[li].bias[k];
    }
    return batch_loss / static_cast<double>(xs.size());
  }

 private:
  void check_shapes() const {
    if (layers_.size() < 2 || layers_.size() > 3) throw InputError("ffnn: need one or two hidden layers");
    std::size_t fan_in = vocab_.size();
    for (const auto& l : layers_) {
      if (l.in != fan_in || l.weight.size() != l.in * l.out || l.bias.size() != l.out) {
        throw InputError("ffnn: inconsistent layer shapes");
      }
      fan_in = l.out;
    }
    if (fan_in != 1) throw InputError("ffnn: output layer must have one unit");
  }

  std::vector<DenseLayer> zero_like() const {
    std::vector<DenseLayer> g;
    for (const auto& l : layers_) {
      g.push_back({l.in, l.out, std::vector<double>(l.weight.size(), 0.0), std::vector<double>(l.bias.size(), 0.0)});
    }
    return g;
  }

  // Adds d(loss_i)/d(params) into grad; returns loss_i.
  double accumulate_gradient(const FeatureVector& x, int y, std::vector<DenseLayer>& grad) const {
    // pre-activations per layer; hidden activations = relu(pre)
    std::vector<std::vector<double>> pre;
    std::vector<std::vector<double>> act;
    {
      const auto& l = layers_[0];
      std::vector<double> z(l.out);
      for (std::size_t o = 0; o < l.out; ++o) {
        double s = l.bias[o];
        const double* row = &l.weight[o * l.in];
        for (std::size_t k = 0; k < x.indices.size(); ++k) s += row[x.indices[k]] * x.values[k];
        z[o] = s;
      }
      pre.push_back(std::move(z));
    }
    for (std::size_t li = 1; li < layers_.size(); ++li) {
      std::vector<double> a(pre.back().size());
      for (std::size_t k = 0; k < a.size(); ++k) a[k] = std::max(0.0, pre.back()[k]);
      const auto& l = layers_[li];
      std::vector<double> z(l.out);
      for (std::size_t o = 0; o < l.out; ++o) {
        double s = l.bias[o];
        const double* row = &l.weight[o * l.in];
        for (std::size_t i = 0; i < l.in; ++i) s += row[i] * a[i];
        z[o] = s;
      }
      act.push_back(std::move(a));
      pre.push_back(std::move(z));
    }
    const double logit = pre.back()[0];
    const double loss = softplus(logit) - y * logit;

    std::vector<double> delta{sigmoid(logit) - y};  // d loss / d pre of current layer
    for (std::size_t li = layers_.size(); li-- > 0;) {
      const auto& l = layers_[li];
      auto& g = grad[li];
      if (li == 0) {
        for (std::size_t o = 0; o < l.out; ++o) {
          if (delta[o] == 0.0) continue;
          double* row = &g.weight[o * l.in];
          for (std::size_t k = 0; k < x.indices.size(); ++k) row[x.indices[k]] += delta[o] * x.values[k];
          g.bias[o] += delta[o];
        }
        break;
      }
      const auto& input = act[li - 1];
      std::vector<double> back(l.in, 0.0);
      for (std::size_t o = 0; o < l.out; ++o) {
        double* row = &g.weight[o * l.in];
        const double* wrow = &l.weight[o * l.in];
        for (std::size_t i = 0; i < l.in; ++i) {
          row[i] += delta[o] * input[i];
          back[i] += delta[o] * wrow[i];
        }
        g.bias[o] += delta[o];
      }
      const auto& z = pre[li - 1];
      for (std::size_t i = 0; i < back.size(); ++i) back[i] = z[i] > 0.0 ? back[i] : 0.0;
      delta.swap(back);
    }
    return loss;
  }

  Vocabulary vocab_;
  std::vector<DenseLayer> layers_;
};

/// Mini-batch SGD on logistic loss; the first shuffle and the initialization
/// both derive from cfg.seed.
inline FeedForwardModel train_ffnn(const Corpus& corpus, const FfnnConfig& cfg, const TokenizerConfig& tok = {}) {
  if (!(cfg.lr > 0.0)) throw InputError("ffnn: lr must be > 0");
  if (cfg.batch_size == 0) throw InputError("ffnn: batch size must be >= 1");
  const auto labels = corpus.labels();
  const auto docs = tokenize_corpus(corpus, tok);
  Vocabulary vocab = build_vocab(std::span<const std::vector<std::string>>(docs));
  FeedForwardModel model(std::move(vocab), cfg.hidden_dims, derive_seed(cfg.seed, 0));

  std::vector<FeatureVector> xs;
  xs.reserve(docs.size());
  for (const auto& d : docs) xs.push_back(model.features(d));

  Rng rng(derive_seed(cfg.seed, 1));
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<FeatureVector> bx;
  std::vector<int> by;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(std::span<std::size_t>(order), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto stop = std::min(order.size(), start + cfg.batch_size);
      bx.clear();
      by.clear();
      for (std::size_t k = start; k < stop; ++k) {
        bx.push_back(xs[order[k]]);
        by.push_back(labels[order[k]]);
      }
      const double l = model.sgd_step(bx, by, cfg.lr);
      if (!std::isfinite(l)) throw Error("ffnn diverged; lower lr");
    }
  }
  for (double p : model.flat_parameters()) {
    if (!std::isfinite(p)) throw Error("ffnn diverged; lower lr");
  }
  return model;
}

inline constexpr std::string_view kFfnnMagic = "TRFF";

inline TensorContainer to_container(const FeedForwardModel& m) {
  TensorContainer c;
  c.header["format"] = "trace-model";
  c.header["version"] = 1;
  c.header["type"] = "ffnn";
  c.header["hidden_dims"] = m.hidden_dims();
  c.header["total_docs"] = m.vocabulary().total_docs();
  c.header["tokens"] = m.vocabulary().tokens();
  c.header["doc_freq"] = m.vocabulary().doc_freqs();
  for (std::size_t l = 0; l < m.layers().size(); ++l) {
    const auto& layer = m.layers()[l];
    c.tensors.push_back({"layer" + std::to_string(l) + ".weight", {layer.out, layer.in}, layer.weight});
    c.tensors.push_back({"layer" + std::to_string(l) + ".bias", {layer.out}, layer.bias});
  }
  return c;
}

inline FeedForwardModel ffnn_from_container(const TensorContainer& c) {
  try {
    if (c.header.at("type") != "ffnn") throw InputError("not an ffnn model");
    if (c.header.at("version").get<int>() != 1) throw InputError("unsupported ffnn model version");
    Vocabulary vocab(c.header.at("tokens").get<std::vector<std::string>>(),
                     c.header.at("doc_freq").get<std::vector<std::uint32_t>>(),
                     c.header.at("total_docs").get<std::size_t>());
    const auto hidden = c.header.at("hidden_dims").get<std::vector<std::size_t>>();
    std::vector<DenseLayer> layers;
    for (std::size_t l = 0; l <= hidden.size(); ++l) {
      const auto& w = c.get("layer" + std::to_string(l) + ".weight");
      const auto& b = c.get("layer" + std::to_string(l) + ".bias");
      if (w.shape.size() != 2) throw InputError("ffnn: weight tensor must be 2-d");
      layers.push_back({w.shape[1], w.shape[0], w.data, b.data});
    }
    return FeedForwardModel(std::move(vocab), std::move(layers));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("ffnn model: ") + e.what());
  }
}

}  // namespace trace
