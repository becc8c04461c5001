#pragma once

#include <mammoclu/rng.hpp>
#include <mammoclu/tape.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

namespace mammoclu {

// Master copies of all learnable parameters, kept in double regardless of the
// compute precision. Name order (std::map) fixes iteration and serialization
// order everywhere.
struct ParamStore {
  std::map<std::string, Eigen::MatrixXd> p;

  Eigen::MatrixXd& add(const std::string& name, int rows, int cols) {
    if (p.count(name)) throw std::logic_error("duplicate parameter: " + name);
    return p[name] = Eigen::MatrixXd::Zero(rows, cols);
  }

  const Eigen::MatrixXd& at(const std::string& name) const {
    auto it = p.find(name);
    if (it == p.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  Eigen::MatrixXd& at(const std::string& name) {
    auto it = p.find(name);
    if (it == p.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& [k, v] : p) n += v.size();
    return n;
  }
};

// Lazily materializes store parameters as tape leaves for one forward pass.
template <typename S>
class ParamBind {
 public:
  ParamBind(ad::Tape<S>& tape, const ParamStore& store) : tape_(tape), store_(store) {}

  int operator()(const std::string& name) {
    auto it = ids_.find(name);
    if (it != ids_.end()) return it->second;
    int id = tape_.leaf(store_.at(name).template cast<S>());
    ids_.emplace(name, id);
    return id;
  }

  // Gradients of every bound parameter, as doubles keyed by name.
  std::map<std::string, Eigen::MatrixXd> grads() const {
    std::map<std::string, Eigen::MatrixXd> g;
    for (const auto& [name, id] : ids_) g[name] = tape_.grad_of(id).template cast<double>();
    return g;
  }

  ad::Tape<S>& tape() { return tape_; }

 private:
  ad::Tape<S>& tape_;
  const ParamStore& store_;
  std::map<std::string, int> ids_;
};

inline void init_weight(ParamStore& ps, Rng& rng, const std::string& name, int din, int dout) {
  Eigen::MatrixXd& W = ps.add(name, din, dout);
  double s = std::sqrt(2.0 / double(din + dout));
  for (int i = 0; i < din; ++i)
    for (int j = 0; j < dout; ++j) W(i, j) = s * rng.normal();
}

inline void init_linear(ParamStore& ps, Rng& rng, const std::string& prefix, int din, int dout) {
  init_weight(ps, rng, prefix + ".W", din, dout);
  ps.add(prefix + ".b", 1, dout);
}

inline void init_layernorm(ParamStore& ps, const std::string& prefix, int d) {
  ps.add(prefix + ".g", 1, d).setOnes();
  ps.add(prefix + ".b", 1, d);
}

template <typename S>
int linear(ParamBind<S>& P, const std::string& prefix, int x) {
  return P.tape().linear(x, P(prefix + ".W"), P(prefix + ".b"));
}

}  // namespace mammoclu
