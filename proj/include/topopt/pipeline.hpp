#pragma once

// Glue between stored datasets, the network and the evaluator.

#include <vector>

#include "topopt/dataset.hpp"
#include "topopt/eval.hpp"
#include "topopt/training.hpp"

namespace topopt {

/// Network example from a stored sample, keeping `channels` (3 or 6)
/// input channels. A 6-channel sample yields the [ux, uy, vf] subset
/// when three are requested.
template <typename T>
unet::Example<T> to_example(const dataset::Sample& s, std::size_t channels) {
  const std::size_t have = s.input.dim(2);
  nn::Tensor<float> in;
  if (channels == have)
    in = s.input;
  else if (channels == 3 && have == 6)
    in = dataset::select_channels(s.input, dataset::kThreeChannelSubset);
  else
    throw ConfigError("cannot build a " + std::to_string(channels) + "-channel input from " + std::to_string(have) +
                      " stored channels");
  nn::Tensor<float> target = s.target;
  target.reshape({s.target.dim(0), s.target.dim(1), 1});
  return {in.cast<T>(), target.cast<T>()};
}

template <typename T>
std::vector<unet::Example<T>> to_examples(const dataset::Dataset& ds, std::size_t channels) {
  std::vector<unet::Example<T>> out;
  out.reserve(ds.samples.size());
  for (const auto& s : ds.samples) out.push_back(to_example<T>(s, channels));
  return out;
}

template <typename T>
void normalize(std::vector<unet::Example<T>>& data, const unet::InputNormalization& n) {
  if (n.empty()) return;
  for (auto& e : data) n.apply(e.input);
}

/// Evaluation problem; the input keeps `channels` channels, unnormalized.
inline eval::Problem to_problem(const dataset::Sample& s, std::size_t index, std::size_t channels) {
  eval::Problem p;
  p.index = index;
  p.volume_fraction = s.meta.volume_fraction;
  p.loads = s.meta.loads;
  p.input = to_example<float>(s, channels).input;
  p.target = Grid<double>(s.target.dim(0), s.target.dim(1));
  for (std::size_t i = 0; i < p.target.size(); ++i) p.target.values()[i] = s.target[i];
  return p;
}

/// Predictor that applies the model's stored input normalization first.
template <typename T>
eval::Predictor make_predictor(unet::UNet<T>& model, const unet::InputNormalization& norm) {
  return [&model, &norm](const nn::Tensor<float>& in) {
    nn::Tensor<T> x = in.cast<T>();
    if (!norm.empty()) norm.apply(x);
    return unet::predict(model, x);
  };
}

inline std::vector<std::size_t> as_indices(const std::vector<std::uint32_t>& v) {
  return {v.begin(), v.end()};
}

}  // namespace topopt
