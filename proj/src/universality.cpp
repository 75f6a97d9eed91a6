#include "deq/universality.hpp"

namespace deq {

WeightTiedNet build_weight_tied_from_mlp(const std::vector<MlpLayer>& layers) {
  if (layers.empty()) throw std::invalid_argument("build_weight_tied_from_mlp: no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const MlpLayer& l = layers[i];
    if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.size() != l.weight.dim(0)) {
      throw ShapeError("build_weight_tied_from_mlp: layer " + std::to_string(i) + " has weight " +
                       to_string(l.weight.shape()) + " and bias " + to_string(l.bias.shape()));
    }
    if (i > 0 && l.weight.dim(1) != layers[i - 1].weight.dim(0)) {
      throw ShapeError("build_weight_tied_from_mlp: layer " + std::to_string(i) + " expects " +
                       std::to_string(l.weight.dim(1)) + " inputs but layer " + std::to_string(i - 1) +
                       " produces " + std::to_string(layers[i - 1].weight.dim(0)));
    }
  }
  WeightTiedNet net;
  std::size_t total = 0;
  for (const MlpLayer& l : layers) {
    net.offsets.push_back(total);
    total += l.weight.dim(0);
  }
  net.offsets.push_back(total);
  const std::size_t p = layers.front().weight.dim(1);
  net.w_z = Tensor({total, total});
  net.w_x = Tensor({total, p});
  net.bias = Tensor({total});
  net.sigma.resize(total);

  for (std::size_t i = 0; i < layers.size(); ++i) {
    const MlpLayer& l = layers[i];
    const std::size_t row0 = net.offsets[i], rows = l.weight.dim(0), cols = l.weight.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      net.bias[row0 + r] = l.bias[r];
      net.sigma[row0 + r] = l.activation;
      for (std::size_t c = 0; c < cols; ++c) {
        if (i == 0) {
          net.w_x.at(row0 + r, c) = l.weight.at(r, c);
        } else {
          net.w_z.at(row0 + r, net.offsets[i - 1] + c) = l.weight.at(r, c);
        }
      }
    }
  }
  return net;
}

Tensor WeightTiedNet::step(const Tensor& z, const Tensor& x) const {
  const std::size_t D = state_width(), p = w_x.dim(1);
  if (z.size() != D || x.size() != p) {
    throw ShapeError("WeightTiedNet::step: expected state of " + std::to_string(D) + " and input of " +
                     std::to_string(p) + ", got " + to_string(z.shape()) + " and " + to_string(x.shape()));
  }
  Tensor out({D});
  for (std::size_t r = 0; r < D; ++r) {
    double acc = bias[r];
    for (std::size_t c = 0; c < D; ++c) acc += w_z.at(r, c) * z[c];
    for (std::size_t c = 0; c < p; ++c) acc += w_x.at(r, c) * x[c];
    out[r] = activate(sigma[r], acc);
  }
  return out;
}

Tensor WeightTiedNet::run(const Tensor& x, std::size_t applications) const {
  Tensor z({state_width()});
  for (std::size_t k = 0; k < applications; ++k) z = step(z, x);
  return z;
}

Tensor WeightTiedNet::output(const Tensor& z) const {
  const std::size_t begin = offsets[offsets.size() - 2], end = offsets.back();
  Tensor out({end - begin});
  for (std::size_t i = begin; i < end; ++i) out[i - begin] = z[i];
  return out;
}

}  // namespace deq
