// Small parameterized layers on top of the tensor engine.
#pragma once

#include <cmath>
#include <string>

#include "mv3d/rng.hpp"
#include "mv3d/tensor.hpp"

namespace mv3d::nn {

using ad::Param;
using ad::ParamStore;
using ad::Tape;
using ad::Tensor;

inline void xavier_init(Param& p, int fan_in, int fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& v : p.value) v = rng.uniform(-limit, limit);
}

struct Linear {
  Param* w = nullptr;  // [in, out]
  Param* b = nullptr;  // [out], may be absent
};

inline Linear add_linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng) {
  Linear l;
  l.w = &store.add(name + ".w", {in, out});
  l.b = &store.add(name + ".b", {out});
  xavier_init(*l.w, in, out, rng);
  return l;
}

inline Linear add_linear_nobias(ParamStore& store, const std::string& name, int in, int out,
                                Rng& rng) {
  Linear l;
  l.w = &store.add(name + ".w", {in, out});
  xavier_init(*l.w, in, out, rng);
  return l;
}

inline Tensor apply_linear(Tape& tape, const Linear& l, const Tensor& x) {
  auto y = ad::matmul(x, tape.use(*l.w));
  return l.b ? ad::add(y, tape.use(*l.b)) : y;
}

struct Mlp2 {
  Linear l1, l2;
};

inline Mlp2 add_mlp2(ParamStore& store, const std::string& name, int in, int hidden, int out,
                     Rng& rng) {
  return {add_linear(store, name + ".l1", in, hidden, rng),
          add_linear(store, name + ".l2", hidden, out, rng)};
}

inline Tensor apply_mlp2(Tape& tape, const Mlp2& m, const Tensor& x) {
  return apply_linear(tape, m.l2, ad::relu(apply_linear(tape, m.l1, x)));
}

struct LayerNormAffine {
  Param* gain = nullptr;
  Param* bias = nullptr;
};

inline LayerNormAffine add_layer_norm(ParamStore& store, const std::string& name, int c) {
  LayerNormAffine ln;
  ln.gain = &store.add(name + ".g", {c});
  ln.bias = &store.add(name + ".b", {c});
  for (auto& v : ln.gain->value) v = 1.0;
  return ln;
}

inline Tensor apply_layer_norm(Tape& tape, const LayerNormAffine& ln, const Tensor& x) {
  return ad::add(ad::mul(ad::layer_norm(x), tape.use(*ln.gain)), tape.use(*ln.bias));
}

}  // namespace mv3d::nn
