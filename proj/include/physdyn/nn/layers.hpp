#pragma once

#include <cmath>
#include <random>
#include <string>

#include "physdyn/nn/autograd.hpp"

namespace physdyn::nn {

// Everything a layer needs at forward time besides its inputs.
template <class T>
struct Context {
  Tape<T>* tape = nullptr;
  ParameterStore<T>* store = nullptr;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;  // null disables dropout (eval mode)

  Var p(const std::string& name) const { return tape->param(store->at(name)); }
  Var drop(Var x) const { return rng ? nn::dropout(*tape, x, dropout, rng) : x; }
};

// weight in x out, bias 1 x out; both U(-1/sqrt(in), 1/sqrt(in)).
template <class T>
void make_linear(ParameterStore<T>& s, std::mt19937_64& rng, const std::string& name, int in, int out,
                 bool bias = true) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  s.add(name + ".weight", uniform_matrix<T>(in, out, bound, rng));
  if (bias) s.add(name + ".bias", uniform_matrix<T>(1, out, bound, rng));
}

template <class T>
Var apply_linear(const Context<T>& c, const std::string& name, Var x) {
  const std::string bias = name + ".bias";
  return linear(*c.tape, x, c.p(name + ".weight"), c.store->contains(bias) ? c.p(bias) : Var{});
}

template <class T>
void make_layer_norm(ParameterStore<T>& s, const std::string& name, int dim) {
  s.add(name + ".weight", Matrix<T>::Ones(1, dim));
  s.add(name + ".bias", Matrix<T>::Zero(1, dim));
}

template <class T>
Var apply_layer_norm(const Context<T>& c, const std::string& name, Var x) {
  return layer_norm(*c.tape, x, c.p(name + ".weight"), c.p(name + ".bias"));
}

// Multi-head attention with separate q/k/v/out projections. The q/k/v
// weights are Xavier-uniform over the stacked 3h x h block, biases zero.
template <class T>
void make_attention(ParameterStore<T>& s, std::mt19937_64& rng, const std::string& name, int h) {
  const double xavier = std::sqrt(6.0 / (h + 3.0 * h));
  for (const char* part : {"q", "k", "v"}) {
    s.add(name + "." + part + ".weight", uniform_matrix<T>(h, h, xavier, rng));
    s.add(name + "." + part + ".bias", Matrix<T>::Zero(1, h));
  }
  s.add(name + ".out.weight", uniform_matrix<T>(h, h, 1.0 / std::sqrt(static_cast<double>(h)), rng));
  s.add(name + ".out.bias", Matrix<T>::Zero(1, h));
}

template <class T>
Var apply_attention(const Context<T>& c, const std::string& name, Var xq, Var xkv, int n_seq, int heads) {
  // A single key per sequence gets softmax weight 1 whatever the query, so
  // the output is the projected value repeated for every query position.
  const auto lk = c.tape->value(xkv).rows() / n_seq;
  if (lk == 1) {
    Var v = apply_linear(c, name + ".v", xkv);
    Var o = apply_linear(c, name + ".out", v);
    return repeat_rows(*c.tape, o, static_cast<int>(c.tape->value(xq).rows() / n_seq));
  }
  Var q = apply_linear(c, name + ".q", xq);
  Var k = apply_linear(c, name + ".k", xkv);
  Var v = apply_linear(c, name + ".v", xkv);
  Var a = attention(*c.tape, q, k, v, n_seq, heads);
  return apply_linear(c, name + ".out", a);
}

template <class T>
void make_feedforward(ParameterStore<T>& s, std::mt19937_64& rng, const std::string& name, int h, int ffn) {
  make_linear(s, rng, name + ".linear1", h, ffn);
  make_linear(s, rng, name + ".linear2", ffn, h);
}

template <class T>
Var apply_feedforward(const Context<T>& c, const std::string& name, Var x) {
  Var hidden = c.drop(relu(*c.tape, apply_linear(c, name + ".linear1", x)));
  return apply_linear(c, name + ".linear2", hidden);
}

// Post-norm encoder layer: x = LN(x + SA(x)); x = LN(x + FF(x)).
template <class T>
void make_encoder_layer(ParameterStore<T>& s, std::mt19937_64& rng, const std::string& name, int h, int ffn) {
  make_attention(s, rng, name + ".self_attn", h);
  make_feedforward(s, rng, name + ".ffn", h, ffn);
  make_layer_norm(s, name + ".norm1", h);
  make_layer_norm(s, name + ".norm2", h);
}

template <class T>
Var apply_encoder_layer(const Context<T>& c, const std::string& name, Var x, int n_seq, int heads) {
  Tape<T>& t = *c.tape;
  Var sa = c.drop(apply_attention(c, name + ".self_attn", x, x, n_seq, heads));
  x = apply_layer_norm(c, name + ".norm1", add(t, x, sa));
  Var ff = c.drop(apply_feedforward(c, name + ".ffn", x));
  return apply_layer_norm(c, name + ".norm2", add(t, x, ff));
}

// Post-norm decoder layer with self-attention, cross-attention to memory and
// a feed-forward block.
template <class T>
void make_decoder_layer(ParameterStore<T>& s, std::mt19937_64& rng, const std::string& name, int h, int ffn) {
  make_attention(s, rng, name + ".self_attn", h);
  make_attention(s, rng, name + ".cross_attn", h);
  make_feedforward(s, rng, name + ".ffn", h, ffn);
  make_layer_norm(s, name + ".norm1", h);
  make_layer_norm(s, name + ".norm2", h);
  make_layer_norm(s, name + ".norm3", h);
}

template <class T>
Var apply_decoder_layer(const Context<T>& c, const std::string& name, Var x, Var memory, int n_seq, int heads) {
  Tape<T>& t = *c.tape;
  Var sa = c.drop(apply_attention(c, name + ".self_attn", x, x, n_seq, heads));
  x = apply_layer_norm(c, name + ".norm1", add(t, x, sa));
  Var ca = c.drop(apply_attention(c, name + ".cross_attn", x, memory, n_seq, heads));
  x = apply_layer_norm(c, name + ".norm2", add(t, x, ca));
  Var ff = c.drop(apply_feedforward(c, name + ".ffn", x));
  return apply_layer_norm(c, name + ".norm3", add(t, x, ff));
}

}  // namespace physdyn::nn
